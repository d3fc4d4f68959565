"""Non-IID partitioners: Pareto (PA), cluster skew (CE / CN) and FedAvg shards.

All partitioners are pure functions of (labels, spec): the only randomness
comes from ``numpy.random.default_rng(spec.seed)``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

METHODS = ("PA", "CE", "CN", "Equal", "NonEqual")


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class PartitionSpec:
    method: str
    num_clients: int
    delta: float = 0.6
    labels_per_client: int = 2
    seed: int = 0
    groups: int = 3
    pareto_shape: float = 1.5
    min_samples: int = 10
    cn_low: float = 0.3
    cn_high: float = 3.0
    equal_shards: int = 2
    nonequal_shards: int = 10
    nonequal_range: tuple[int, int] = (6, 14)

    def __post_init__(self):
        if self.method not in METHODS:
            raise PartitionError(f"unknown partition method {self.method!r}; pick one of {METHODS}")
        if self.num_clients < 1:
            raise PartitionError("num_clients must be >= 1")
        if self.labels_per_client < 1:
            raise PartitionError("labels_per_client must be >= 1")
        if self.method in ("CE", "CN"):
            if not 0 < self.delta <= 1:
                raise PartitionError("delta must lie in (0, 1]")
            if self.main_group_size < 1:
                raise PartitionError(f"delta*N = {self.delta * self.num_clients:g} rounds below 1")
            if self.groups < 1:
                raise PartitionError("groups must be >= 1")
        lo, hi = self.nonequal_range
        if self.method == "NonEqual" and not lo <= self.nonequal_shards <= hi:
            raise PartitionError("nonequal_shards must lie inside nonequal_range")

    @property
    def main_group_size(self) -> int:
        return int(math.floor(self.delta * self.num_clients + 0.5))


@dataclass
class PartitionManifest:
    spec: PartitionSpec
    assignments: list[np.ndarray]
    label_hist: np.ndarray
    dataset_size: int
    unassigned: np.ndarray
    group_ids: list[int] | None = None
    client_labels: list[list[int]] | None = None
    shards_per_client: list[int] | None = None
    extra: dict = field(default_factory=dict)

    @property
    def num_clients(self) -> int:
        return len(self.assignments)

    @property
    def class_count(self) -> int:
        return self.label_hist.shape[1]

    def counts(self) -> np.ndarray:
        return np.array([len(a) for a in self.assignments], dtype=np.int64)

    def validate(self) -> None:
        """Disjointness, conservation and nonempty shards."""
        joined = np.concatenate(self.assignments + [self.unassigned])
        if len(np.unique(joined)) != len(joined):
            raise PartitionError("sample assigned twice")
        if len(joined) != self.dataset_size or (len(joined) and joined.max() >= self.dataset_size):
            raise PartitionError("assignments do not cover the dataset")
        if np.any(self.counts() == 0):
            raise PartitionError("client with an empty shard")


def _class_pools(labels: np.ndarray, class_count: int, rng: np.random.Generator) -> list[np.ndarray]:
    return [rng.permutation(np.flatnonzero(labels == c)) for c in range(class_count)]


def _finish(spec, labels, class_count, assignments, **kw) -> PartitionManifest:
    assignments = [np.asarray(a, dtype=np.int64) for a in assignments]
    used = np.concatenate(assignments) if assignments else np.zeros(0, np.int64)
    mask = np.ones(len(labels), dtype=bool)
    mask[used] = False
    hist = np.stack([np.bincount(labels[a], minlength=class_count) for a in assignments])
    m = PartitionManifest(
        spec=spec,
        assignments=assignments,
        label_hist=hist,
        dataset_size=len(labels),
        unassigned=np.flatnonzero(mask),
        **kw,
    )
    m.validate()
    return m


def _labels_of(ds_or_labels):
    if hasattr(ds_or_labels, "y"):
        return np.asarray(ds_or_labels.y), int(ds_or_labels.class_count)
    labels = np.asarray(ds_or_labels)
    return labels, int(labels.max()) + 1


def partition_pareto(ds, spec: PartitionSpec) -> PartitionManifest:
    """Each client gets ``labels_per_client`` consecutive labels; every label's
    samples are split among its holders with Pareto-distributed shares."""
    if spec.method != "PA":
        raise PartitionError("partition_pareto needs method PA")
    labels, class_count = _labels_of(ds)
    n, lpc = spec.num_clients, spec.labels_per_client
    if lpc > class_count:
        raise PartitionError("labels_per_client exceeds class count")
    rng = np.random.default_rng(spec.seed)
    client_labels = [[(k + j) % class_count for j in range(lpc)] for k in range(n)]
    pools = _class_pools(labels, class_count, rng)
    floor_per_label = max(1, math.ceil(spec.min_samples / lpc))
    parts: list[list[np.ndarray]] = [[] for _ in range(n)]
    for c in range(class_count):
        holders = [k for k in range(n) if c in client_labels[k]]
        if not holders:
            continue
        pool = pools[c]
        spare = len(pool) - floor_per_label * len(holders)
        if spare < 0:
            raise PartitionError(
                f"label {c}: {len(pool)} samples cannot give {len(holders)} clients "
                f"{floor_per_label} each"
            )
        weights = rng.pareto(spec.pareto_shape, size=len(holders)) + 1.0
        share = spare * weights / weights.sum()
        extra = np.floor(share).astype(np.int64)
        left = spare - int(extra.sum())
        extra[np.argsort(-(share - extra), kind="stable")[:left]] += 1
        start = 0
        for k, cnt in zip(holders, floor_per_label + extra):
            parts[k].append(pool[start : start + cnt])
            start += cnt
    return _finish(
        spec,
        labels,
        class_count,
        [np.concatenate(p) for p in parts],
        client_labels=client_labels,
        extra={"pareto_shape": spec.pareto_shape, "min_samples": spec.min_samples},
    )


def cluster_layout(spec: PartitionSpec, class_count: int) -> tuple[list[int], list[list[int]]]:
    """Group id and label set per client for cluster-skew partitioning.

    Classes are chunked (in index order) into ``spec.groups`` disjoint
    clusters. Group 0 is the main group with ``round(delta * N)`` clients;
    the rest are spread evenly over the remaining groups.
    """
    g, lpc = spec.groups, spec.labels_per_client
    if class_count < g * lpc:
        raise PartitionError(
            f"cannot form {g} label clusters of >= {lpc} classes from {class_count} classes"
        )
    clusters = [list(map(int, c)) for c in np.array_split(np.arange(class_count), g)]
    main = spec.main_group_size
    rest = spec.num_clients - main
    if rest and g == 1:
        raise PartitionError("a single group cannot hold clients outside the main group")
    minor = min(g - 1, rest)
    sizes = [main] + ([len(s) for s in np.array_split(np.arange(rest), minor)] if minor else [])
    group_ids: list[int] = []
    client_labels: list[list[int]] = []
    for gid, size in enumerate(sizes):
        cl = clusters[gid]
        for j in range(size):
            group_ids.append(gid)
            client_labels.append([cl[(j * lpc + i) % len(cl)] for i in range(lpc)])
    return group_ids, client_labels


def partition_clustered(ds, spec: PartitionSpec) -> PartitionManifest:
    """Cluster-skew partitions: CE (equal per-client counts) or CN (unbalanced)."""
    if spec.method not in ("CE", "CN"):
        raise PartitionError("partition_clustered needs method CE or CN")
    labels, class_count = _labels_of(ds)
    n = spec.num_clients
    group_ids, client_labels = cluster_layout(spec, class_count)
    rng = np.random.default_rng(spec.seed)
    if spec.method == "CN":
        factor = np.exp(rng.uniform(math.log(spec.cn_low), math.log(spec.cn_high), size=n))
        factor = factor / factor.mean()
    else:
        factor = np.ones(n)
    pools = _class_pools(labels, class_count, rng)
    holders = {c: [k for k in range(n) if c in client_labels[k]] for c in range(class_count)}
    # largest per-label quota that every used label can supply
    quota = min(len(pools[c]) / factor[h].sum() for c, h in holders.items() if h)
    per_label = np.floor(quota * factor).astype(np.int64)
    if per_label.min() < 1:
        raise PartitionError("too few samples for every client to hold each of its labels")
    parts: list[list[np.ndarray]] = [[] for _ in range(n)]
    for c, hs in holders.items():
        start = 0
        for k in hs:
            parts[k].append(pools[c][start : start + per_label[k]])
            start += per_label[k]
    return _finish(
        spec,
        labels,
        class_count,
        [np.concatenate(p) for p in parts],
        group_ids=group_ids,
        client_labels=client_labels,
        extra={"main_group_size": spec.main_group_size, "groups": spec.groups},
    )


def _nonequal_counts(n: int, total: int, lo: int, hi: int, rng: np.random.Generator) -> np.ndarray:
    counts = rng.integers(lo, hi + 1, size=n)
    diff = total - int(counts.sum())
    while diff:
        step = 1 if diff > 0 else -1
        ok = np.flatnonzero(counts < hi) if step > 0 else np.flatnonzero(counts > lo)
        counts[rng.choice(ok)] += step
        diff -= step
    return counts


def partition_shards(ds, spec: PartitionSpec) -> PartitionManifest:
    """Sort by label, cut into shards, deal shards to clients."""
    if spec.method not in ("Equal", "NonEqual"):
        raise PartitionError("partition_shards needs method Equal or NonEqual")
    labels, class_count = _labels_of(ds)
    n = spec.num_clients
    rng = np.random.default_rng(spec.seed)
    if spec.method == "Equal":
        n_shards = spec.equal_shards * n
        per_client = np.full(n, spec.equal_shards)
    else:
        n_shards = spec.nonequal_shards * n
        lo, hi = spec.nonequal_range
        per_client = _nonequal_counts(n, n_shards, lo, hi, rng)
    if len(labels) < n_shards:
        raise PartitionError(f"{len(labels)} samples cannot fill {n_shards} shards")
    order = np.argsort(labels, kind="stable")
    shards = np.array_split(order, n_shards)
    perm = rng.permutation(n_shards)
    bounds = np.concatenate([[0], np.cumsum(per_client)])
    assignments = [
        np.concatenate([shards[s] for s in np.sort(perm[bounds[k] : bounds[k + 1]])]) for k in range(n)
    ]
    return _finish(
        spec,
        labels,
        class_count,
        assignments,
        shards_per_client=[int(c) for c in per_client],
        extra={"shards": n_shards},
    )


def partition(ds, spec: PartitionSpec) -> PartitionManifest:
    if spec.method == "PA":
        return partition_pareto(ds, spec)
    if spec.method in ("CE", "CN"):
        return partition_clustered(ds, spec)
    return partition_shards(ds, spec)


@dataclass
class StatsReport:
    total: int
    mean: float
    std: float
    counts: np.ndarray
    label_hist: np.ndarray
    group_ids: list[int] | None = None

    def labels_per_client(self) -> np.ndarray:
        return (self.label_hist > 0).sum(axis=1)


def partition_stats(m: PartitionManifest) -> StatsReport:
    counts = m.counts()
    return StatsReport(
        total=int(counts.sum()),
        mean=float(counts.mean()),
        std=float(counts.std()),
        counts=counts,
        label_hist=m.label_hist.copy(),
        group_ids=m.group_ids,
    )


def stats_to_csv(report: StatsReport) -> str:
    """Per-client table followed by summary rows (client_id ``total``/``mean``/``std``)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    c = report.label_hist.shape[1]
    w.writerow(["client_id", "group_id", "n_samples", "n_labels"] + [f"label_{i}" for i in range(c)])
    for k, row in enumerate(report.label_hist):
        gid = report.group_ids[k] if report.group_ids else ""
        w.writerow([k, gid, int(report.counts[k]), int((row > 0).sum())] + [int(v) for v in row])
    w.writerow(["total", "", report.total, ""] + [""] * c)
    w.writerow(["mean", "", repr(report.mean), ""] + [""] * c)
    w.writerow(["std", "", repr(report.std), ""] + [""] * c)
    return buf.getvalue()


# --- manifest file ---------------------------------------------------------

_SPEC_TYPES = {f: type(v) for f, v in asdict(PartitionSpec("PA", 1)).items()}


def manifest_to_text(m: PartitionManifest) -> str:
    lines = ["# feddrl partition manifest"]
    for key, value in asdict(m.spec).items():
        if isinstance(value, tuple):
            value = ",".join(map(str, value))
        lines.append(f"# {key} = {value}")
    lines.append(f"# dataset_size = {m.dataset_size}")
    lines.append(f"# class_count = {m.class_count}")
    if m.group_ids is not None:
        lines.append("# group_ids = " + ",".join(map(str, m.group_ids)))
    if m.shards_per_client is not None:
        lines.append("# shards_per_client = " + ",".join(map(str, m.shards_per_client)))
    lines.append("client_id\tsample_index")
    for k, idx in enumerate(m.assignments):
        lines.extend(f"{k}\t{i}" for i in idx.tolist())
    return "\n".join(lines) + "\n"


def manifest_from_text(text: str, labels: np.ndarray) -> PartitionManifest:
    header: dict[str, str] = {}
    rows: list[tuple[int, int]] = []
    for line in text.splitlines():
        if line.startswith("#"):
            key, sep, value = line[1:].partition("=")
            if sep:
                header[key.strip()] = value.strip()
        elif line and not line.startswith("client_id"):
            a, b = line.split("\t")
            rows.append((int(a), int(b)))
    spec_kw = {}
    for key, typ in _SPEC_TYPES.items():
        if key not in header:
            continue
        raw = header[key]
        spec_kw[key] = tuple(int(v) for v in raw.split(",")) if typ is tuple else typ(raw)
    spec = PartitionSpec(**spec_kw)
    n = spec.num_clients
    buckets: list[list[int]] = [[] for _ in range(n)]
    for k, i in rows:
        buckets[k].append(i)
    labels = np.asarray(labels)
    if int(header["dataset_size"]) != len(labels):
        raise PartitionError("manifest was built for a different dataset size")
    class_count = int(header["class_count"])
    kw = {}
    if "group_ids" in header:
        kw["group_ids"] = [int(v) for v in header["group_ids"].split(",")]
    if "shards_per_client" in header:
        kw["shards_per_client"] = [int(v) for v in header["shards_per_client"].split(",")]
    return _finish(spec, labels, class_count, buckets, **kw)


def write_manifest(path: str | Path, m: PartitionManifest) -> None:
    Path(path).write_text(manifest_to_text(m))


def read_manifest(path: str | Path, labels: np.ndarray) -> PartitionManifest:
    return manifest_from_text(Path(path).read_text(), labels)
