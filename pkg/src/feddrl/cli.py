"""Command-line entry point: ``feddrl {partition,run,report,sweep,export-mnist}``.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import itertools
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from feddrl.data import PartitionError, export_mnist_subset, partition_stats, stats_to_csv, write_manifest
from feddrl.experiment import (
    ConfigError,
    ExperimentConfig,
    apply_overrides,
    build_partition,
    config_from_text,
    config_to_text,
    load_config,
    load_data,
    run_experiment,
)
from feddrl.metrics import RunEntry, best_top1, build_report, read_run_log

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("feddrl")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config, args.set) if args.config else apply_overrides(ExperimentConfig(), args.set)
    cfg.validate()
    return cfg


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    return Path(args.out or cfg.experiment.output)


def cmd_partition(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    train, _ = load_data(cfg)
    manifest = build_partition(cfg, train)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(config_to_text(cfg))
    write_manifest(out / "manifest.tsv", manifest)
    stats = partition_stats(manifest)
    (out / "stats.csv").write_text(stats_to_csv(stats))
    print(f"{len(manifest.assignments)} clients, {stats.total} samples, mean {stats.mean:.2f}, std {stats.std:.2f} -> {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    result = run_experiment(cfg, out, progress_every=args.progress)
    print(f"{len(result.log)} rounds, best top-1 {best_top1(result.log):.4f} -> {out}")
    return EXIT_OK


def setting_label(cfg: ExperimentConfig) -> str:
    data = cfg.data.source if cfg.data.source == "synthetic" else cfg.data.name
    label = f"{data}/{cfg.partition.method}/N={cfg.partition.num_clients}"
    if cfg.partition.method in ("CE", "CN"):
        label += f"/d={cfg.partition.delta:g}"
    return label


def load_run_entry(run_dir: Path) -> RunEntry:
    cfg_path = run_dir / "config.ini"
    if not cfg_path.exists() or not (run_dir / "rounds.csv").exists():
        raise FileNotFoundError(f"{run_dir}: missing config.ini or rounds.csv")
    cfg = config_from_text(cfg_path.read_text())
    run_log = read_run_log(run_dir)
    if not len(run_log):
        raise ValueError(f"{run_dir}: empty run log")
    return RunEntry(run_dir.name, cfg.fl.aggregator, setting_label(cfg), run_log)


def cmd_report(args) -> int:
    try:
        runs = [load_run_entry(Path(d)) for d in args.runs]
    except (OSError, ValueError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    tables = build_report(runs, smooth_window=args.window)
    print(tables["summary.txt"], end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for name, text in tables.items():
            (out / name).write_text(text)
    return EXIT_OK


def _sweep_one(job):
    text, out = job
    run_experiment(config_from_text(text), out, progress_every=0)
    return out


def sweep_grid(params: list[str]) -> list[list[str]]:
    axes = []
    for item in params:
        key, sep, values = item.partition("=")
        if not sep or "." not in key or not values:
            raise ConfigError(f"sweep parameter {item!r} is not section.key=v1,v2,...")
        axes.append([f"{key.strip()}={v.strip()}" for v in values.split(",")])
    return [list(combo) for combo in itertools.product(*axes)]


def cmd_sweep(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    jobs = []
    for combo in sweep_grid(args.param):
        run_cfg = apply_overrides(cfg, combo)
        run_cfg.validate()
        name = "__".join(c.replace("=", "-") for c in combo)
        jobs.append((config_to_text(run_cfg), str(out / name)))
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            done = list(pool.map(_sweep_one, jobs))
    else:
        done = [_sweep_one(j) for j in jobs]
    for d in done:
        print(d)
    return EXIT_OK


def cmd_export_mnist(args) -> int:
    print(export_mnist_subset(args.dest, args.test_per_class))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feddrl", description="Federated learning with learned aggregation weights.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("config", nargs="?", help="INI experiment config")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config key")
        p.add_argument("--out", help="output directory (default: experiment.output)")
        return p

    p = with_config(sub.add_parser("partition", help="write a client partition manifest and stats"))
    p.set_defaults(func=cmd_partition)

    p = with_config(sub.add_parser("run", help="run one federated experiment"))
    p.add_argument("--progress", type=int, default=10, help="log every N rounds (0 disables)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="compare finished runs")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", help="directory for the CSV tables")
    p.add_argument("--window", type=int, default=10, help="smoothing window in rounds")
    p.set_defaults(func=cmd_report)

    p = with_config(sub.add_parser("sweep", help="run a grid of experiments"))
    p.add_argument("--param", action="append", required=True, metavar="SECTION.KEY=V1,V2", help="swept key")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-mnist", help="write the bundled 5k MNIST sample as IDX files")
    p.add_argument("dest")
    p.add_argument("--test-per-class", type=int, default=100)
    p.set_defaults(func=cmd_export_mnist)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, PartitionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
