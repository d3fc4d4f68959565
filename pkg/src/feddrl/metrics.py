"""Run logs and the evaluation metrics computed over them.

A run directory holds ``rounds.csv`` (deterministic per-round values) and
``timing.csv`` (wall-clock measurements, kept apart so that repeated runs
produce byte-identical ``rounds.csv`` files).
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

ROUND_COLUMNS = [
    "round",
    "top1",
    "loss_mean",
    "loss_var",
    "clients",
    "losses_before",
    "losses_after",
    "impacts",
]
TIMING_COLUMNS = ["round", "impact_seconds", "aggregation_seconds"]


@dataclass
class RoundRecord:
    round: int
    top1: float
    losses_before: np.ndarray
    impacts: np.ndarray
    clients: list[int] = field(default_factory=list)
    losses_after: np.ndarray | None = None
    impact_seconds: float = 0.0
    aggregation_seconds: float = 0.0

    @property
    def loss_mean(self) -> float:
        return float(np.mean(self.losses_before))

    @property
    def loss_var(self) -> float:
        return float(np.var(self.losses_before))

    def __eq__(self, other):
        if not isinstance(other, RoundRecord):
            return NotImplemented
        after_a = self.losses_after if self.losses_after is not None else np.zeros(0)
        after_b = other.losses_after if other.losses_after is not None else np.zeros(0)
        return (
            self.round == other.round
            and self.top1 == other.top1
            and list(self.clients) == list(other.clients)
            and np.array_equal(self.losses_before, other.losses_before)
            and np.array_equal(after_a, after_b)
            and np.array_equal(self.impacts, other.impacts)
            and self.impact_seconds == other.impact_seconds
            and self.aggregation_seconds == other.aggregation_seconds
        )


@dataclass
class RunLog:
    records: list[RoundRecord] = field(default_factory=list)

    def append(self, rec: RoundRecord) -> None:
        if self.records and rec.round <= self.records[-1].round:
            raise ValueError("rounds must be strictly increasing")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other):
        return isinstance(other, RunLog) and self.records == other.records

    @property
    def rounds(self) -> list[int]:
        return [r.round for r in self.records]

    @property
    def top1(self) -> np.ndarray:
        return np.array([r.top1 for r in self.records])


def _vec(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def _unvec(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split()]) if text.strip() else np.zeros(0)


def rounds_csv(log: RunLog) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROUND_COLUMNS)
    for r in log.records:
        after = r.losses_after if r.losses_after is not None else []
        w.writerow(
            [
                r.round,
                repr(float(r.top1)),
                repr(r.loss_mean),
                repr(r.loss_var),
                " ".join(str(int(c)) for c in r.clients),
                _vec(r.losses_before),
                _vec(after),
                _vec(r.impacts),
            ]
        )
    return buf.getvalue()


def timing_csv(log: RunLog) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TIMING_COLUMNS)
    for r in log.records:
        w.writerow([r.round, repr(float(r.impact_seconds)), repr(float(r.aggregation_seconds))])
    return buf.getvalue()


def parse_run_log(rounds_text: str, timing_text: str | None = None) -> RunLog:
    reader = csv.DictReader(io.StringIO(rounds_text))
    if reader.fieldnames != ROUND_COLUMNS:
        raise ValueError(f"unexpected rounds.csv columns {reader.fieldnames}")
    timing = {}
    if timing_text:
        for row in csv.DictReader(io.StringIO(timing_text)):
            timing[int(row["round"])] = (float(row["impact_seconds"]), float(row["aggregation_seconds"]))
    log = RunLog()
    for row in reader:
        rnd = int(row["round"])
        after = _unvec(row["losses_after"])
        t_imp, t_agg = timing.get(rnd, (0.0, 0.0))
        log.append(
            RoundRecord(
                round=rnd,
                top1=float(row["top1"]),
                losses_before=_unvec(row["losses_before"]),
                impacts=_unvec(row["impacts"]),
                clients=[int(c) for c in row["clients"].split()],
                losses_after=after if after.size else None,
                impact_seconds=t_imp,
                aggregation_seconds=t_agg,
            )
        )
    return log


def write_run_log(directory: str | Path, log: RunLog) -> None:
    directory = Path(directory)
    (directory / "rounds.csv").write_text(rounds_csv(log))
    (directory / "timing.csv").write_text(timing_csv(log))


def read_run_log(directory: str | Path) -> RunLog:
    directory = Path(directory)
    timing = directory / "timing.csv"
    return parse_run_log(
        (directory / "rounds.csv").read_text(),
        timing.read_text() if timing.exists() else None,
    )


# --- metrics --------------------------------------------------------------------


def best_top1(log: RunLog) -> float:
    if not log.records:
        raise ValueError("empty run log")
    return float(max(r.top1 for r in log.records))


def smooth(series: Sequence[float], window: int = 10) -> np.ndarray:
    """Means over consecutive blocks of ``window``; a short tail block is averaged as is."""
    if window < 1:
        raise ValueError("window must be >= 1")
    s = np.asarray(series, dtype=np.float64)
    return np.array([s[i : i + window].mean() for i in range(0, len(s), window)])


def _ratio(a: float, b: float) -> float:
    if b == 0.0:
        return 1.0 if a == 0.0 else math.inf
    return a / b


def loss_stats_normalized(log: RunLog, reference: RunLog) -> list[tuple[float, float]]:
    """Per round ``(mean / mean_ref, var / var_ref)`` of the pre-training client losses."""
    if log.rounds != reference.rounds:
        raise ValueError("logs cover different rounds")
    out = []
    for r, ref in zip(log.records, reference.records):
        out.append((_ratio(r.loss_mean, ref.loss_mean), _ratio(r.loss_var, ref.loss_var)))
    return out


def rounds_to_target(log: RunLog, target: float) -> int | None:
    if not 0 < target <= 1:
        raise ValueError("target must lie in (0, 1]")
    for r in log.records:
        if r.top1 >= target:
            return r.round
    return None


def tail_loss_variance(log: RunLog, last: int = 50) -> float:
    """Mean over the last ``last`` rounds of the per-client loss variance."""
    recs = log.records[-last:]
    return float(np.mean([r.loss_var for r in recs]))


def improvement(drl: float, baselines: Iterable[float]) -> tuple[float, float]:
    """Relative gain (in %) over the best and the worst baseline: impr.(a), impr.(b)."""
    b = list(baselines)
    if not b:
        raise ValueError("no baselines")
    best, worst = max(b), min(b)
    return 100.0 * (drl - best) / best, 100.0 * (drl - worst) / worst


def mean_timing(log: RunLog) -> tuple[float, float]:
    """Mean (impact, aggregation) seconds per round."""
    if not log.records:
        return 0.0, 0.0
    return (
        float(np.mean([r.impact_seconds for r in log.records])),
        float(np.mean([r.aggregation_seconds for r in log.records])),
    )


# --- comparison report -------------------------------------------------------------

DRL_METHOD = "feddrl"


@dataclass
class RunEntry:
    name: str
    method: str
    setting: str
    log: RunLog


def _csv(rows: list[list]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def build_report(runs: Sequence[RunEntry], smooth_window: int = 10) -> dict[str, str]:
    """Plot-ready CSV tables and a plain-text summary.

    Runs sharing (method, setting) are treated as seeds; their best top-1
    values are averaged.
    """
    if not runs:
        raise ValueError("no runs to report")
    best: dict[tuple[str, str], list[float]] = defaultdict(list)
    for r in runs:
        best[(r.method, r.setting)].append(best_top1(r.log))
    methods = sorted({m for m, _ in best}, key=lambda m: (m == DRL_METHOD, m))
    settings = sorted({s for _, s in best})
    mean_best = {k: float(np.mean(v)) for k, v in best.items()}

    out: dict[str, str] = {}

    rows = [["run", "method", "setting", "best_top1", "rounds", "impact_ms", "aggregation_ms"]]
    for r in runs:
        t_imp, t_agg = mean_timing(r.log)
        rows.append([r.name, r.method, r.setting, repr(best_top1(r.log)), len(r.log), repr(1e3 * t_imp), repr(1e3 * t_agg)])
    out["runs.csv"] = _csv(rows)

    rows = [["run", "method", "setting", "block", "first_round", "smoothed_top1"]]
    for r in runs:
        for i, v in enumerate(smooth(r.log.top1, smooth_window)):
            rows.append([r.name, r.method, r.setting, i, r.log.rounds[i * smooth_window], repr(float(v))])
    out["accuracy_curves.csv"] = _csv(rows)

    rows = [["run", "method", "setting", "reference", "round", "mean_ratio", "var_ratio"]]
    for s in settings:
        refs = [r for r in runs if r.setting == s and r.method == DRL_METHOD]
        if not refs:
            continue
        ref = refs[0]
        for r in runs:
            if r.setting != s or r.log.rounds != ref.log.rounds:
                continue
            for rnd, (mr, vr) in zip(r.log.rounds, loss_stats_normalized(r.log, ref.log)):
                rows.append([r.name, r.method, s, ref.name, rnd, repr(mr), repr(vr)])
    out["loss_ratios.csv"] = _csv(rows)

    rows = [["setting", "target", "run", "method", "rounds_to_target"]]
    for s in settings:
        in_s = [r for r in runs if r.setting == s]
        target = min(best_top1(r.log) for r in in_s)
        for r in in_s:
            hit = rounds_to_target(r.log, target) if target > 0 else None
            rows.append([s, repr(target), r.name, r.method, "" if hit is None else hit])
    out["convergence.csv"] = _csv(rows)

    rows = [["method", "impact_ms", "aggregation_ms"]]
    for m in methods:
        logs = [r.log for r in runs if r.method == m]
        t = np.mean([mean_timing(lg) for lg in logs], axis=0)
        rows.append([m, repr(1e3 * float(t[0])), repr(1e3 * float(t[1]))])
    out["timing.csv"] = _csv(rows)

    out["summary.txt"] = summary_table(methods, settings, mean_best)
    return out


def summary_table(methods: list[str], settings: list[str], mean_best: dict[tuple[str, str], float]) -> str:
    """Methods x settings table of best top-1 (%), plus impr.(a)/(b) rows."""
    width = max(12, *(len(s) + 2 for s in settings))
    head = f"{'method':<12}" + "".join(f"{s:>{width}}" for s in settings)
    lines = [head, "-" * len(head)]
    for m in methods:
        cells = []
        for s in settings:
            v = mean_best.get((m, s))
            cells.append(f"{100 * v:>{width}.2f}" if v is not None else f"{'-':>{width}}")
        lines.append(f"{m:<12}" + "".join(cells))
    if DRL_METHOD in methods and len(methods) > 1:
        imp_a, imp_b = [], []
        for s in settings:
            drl = mean_best.get((DRL_METHOD, s))
            base = [v for (m, ss), v in mean_best.items() if ss == s and m != DRL_METHOD]
            if drl is None or not base:
                imp_a.append(f"{'-':>{width}}")
                imp_b.append(f"{'-':>{width}}")
                continue
            a, b = improvement(drl, base)
            imp_a.append(f"{a:>{width - 1}.2f}%")
            imp_b.append(f"{b:>{width - 1}.2f}%")
        lines.append(f"{'impr.(a)':<12}" + "".join(imp_a))
        lines.append(f"{'impr.(b)':<12}" + "".join(imp_b))
    return "\n".join(lines) + "\n"
