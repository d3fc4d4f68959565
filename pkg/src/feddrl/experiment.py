"""Experiment configuration (INI text) and the end-to-end run driver."""

from __future__ import annotations

import configparser
import dataclasses
import io
import logging
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from feddrl.data import (
    Dataset,
    PartitionManifest,
    PartitionSpec,
    export_mnist_subset,
    load_idx_dataset,
    make_synthetic,
    partition,
    partition_stats,
    read_manifest,
    stats_to_csv,
    write_manifest,
)
from feddrl.drl import AgentConfig, DrlAgent, FedDrlAggregator, two_stage_train
from feddrl.fl import STREAM_MODEL, FederatedRun, RoundConfig, stream_rng
from feddrl.metrics import RunLog, write_run_log
from feddrl.nn import Network, SgdConfig, build_classifier, save_network

log = logging.getLogger("feddrl")

DATA_SOURCES = ("synthetic", "idx", "mnist-subset")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass
class ExperimentSection:
    seed: int = 0
    output: str = "runs/default"


@dataclass
class DataConfig:
    source: str = "synthetic"
    path: str = ""
    name: str = "mnist"
    train_limit: int | None = None
    test_limit: int | None = None
    classes: int = 10
    dims: int = 20
    samples: int = 5000
    test_samples: int = 1000
    separation: float = 1.0
    noise: float = 1.0
    seed: int = 0


@dataclass
class PartitionConfig:
    method: str = "CE"
    num_clients: int = 10
    delta: float = 0.6
    labels_per_client: int = 2
    groups: int = 3
    pareto_shape: float = 1.5
    min_samples: int = 10
    cn_low: float = 0.3
    cn_high: float = 3.0
    seed: int | None = None
    manifest: str = ""


@dataclass
class ModelConfig:
    kind: str = "mlp"
    hidden: int = 64
    channels: int = 8
    kernel: int = 5


@dataclass
class FlConfig:
    aggregator: str = "fedavg"
    participants_per_round: int = 10
    max_rounds: int = 1000
    learning_rate: float = 0.01
    batch_size: int = 10
    epochs: int = 5
    proximal_mu: float = 0.01
    impact_override: str = ""
    threads: int = 1


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: DataConfig = field(default_factory=DataConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    fl: FlConfig = field(default_factory=FlConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)

    @property
    def seed(self) -> int:
        return self.experiment.seed

    def partition_spec(self) -> PartitionSpec:
        p = self.partition
        return PartitionSpec(
            p.method,
            p.num_clients,
            delta=p.delta,
            labels_per_client=p.labels_per_client,
            seed=self.seed if p.seed is None else p.seed,
            groups=p.groups,
            pareto_shape=p.pareto_shape,
            min_samples=p.min_samples,
            cn_low=p.cn_low,
            cn_high=p.cn_high,
        )

    def round_config(self, seed: int | None = None) -> RoundConfig:
        f = self.fl
        return RoundConfig(
            total_clients=self.partition.num_clients,
            participants_per_round=f.participants_per_round,
            max_rounds=f.max_rounds,
            sgd=SgdConfig(f.learning_rate, f.batch_size, f.epochs),
            aggregator=f.aggregator,
            seed=self.seed if seed is None else seed,
            proximal_mu=f.proximal_mu,
            impact_override=f.impact_override or None,
            threads=f.threads,
        )

    def validate(self) -> None:
        try:
            if self.data.source not in DATA_SOURCES:
                raise ValueError(f"data.source must be one of {DATA_SOURCES}")
            if self.model.kind not in ("mlp", "cnn"):
                raise ValueError("model.kind must be mlp or cnn")
            self.partition_spec()
            self.round_config()
            if self.fl.impact_override and self.fl.aggregator != "feddrl":
                raise ValueError("fl.impact_override only applies to the feddrl aggregator")
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


# --- INI (de)serialisation ----------------------------------------------------------------


def _convert(text: str, hint):
    args = typing.get_args(hint)
    if args and type(None) in args:
        if text.strip() in ("", "none", "None"):
            return None
        hint = next(a for a in args if a is not type(None))
    if hint is bool:
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    return text.strip()


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def set_option(cfg: ExperimentConfig, section: str, key: str, text: str) -> ExperimentConfig:
    """Return ``cfg`` with ``section.key`` replaced by the parsed ``text``."""
    if section not in {f.name for f in dataclasses.fields(cfg)}:
        raise ConfigError(f"unknown config section [{section}]")
    sub = getattr(cfg, section)
    hints = typing.get_type_hints(type(sub))
    if key not in hints:
        raise ConfigError(f"unknown key {section}.{key}")
    try:
        value = _convert(text, hints[key])
        new_sub = dataclasses.replace(sub, **{key: value})
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{section}.{key}: {exc}") from exc
    return dataclasses.replace(cfg, **{section: new_sub})


def config_from_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    cfg = base or ExperimentConfig()
    for section in parser.sections():
        for key, value in parser.items(section):
            cfg = set_option(cfg, section, key, value)
    return cfg


def load_config(path: str | Path, overrides: typing.Sequence[str] = ()) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = config_from_text(text)
    return apply_overrides(cfg, overrides)


def apply_overrides(cfg: ExperimentConfig, overrides: typing.Sequence[str]) -> ExperimentConfig:
    for item in overrides:
        name, sep, value = item.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not section.key=value")
        cfg = set_option(cfg, section, key, value)
    return cfg


def config_to_text(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for f in dataclasses.fields(cfg):
        sub = getattr(cfg, f.name)
        parser[f.name] = {k.name: _format(getattr(sub, k.name)) for k in dataclasses.fields(sub)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


# --- run driver ----------------------------------------------------------------------------


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.source == "synthetic":
        return make_synthetic(d.classes, d.dims, d.samples, d.seed, d.test_samples, d.separation, d.noise)
    path = Path(d.path or "data/mnist-subset")
    if d.source == "mnist-subset" and not (path / "train-labels-idx1-ubyte").exists():
        export_mnist_subset(path)
    return load_idx_dataset(path, d.name, d.train_limit, d.test_limit)


def build_partition(cfg: ExperimentConfig, train: Dataset) -> PartitionManifest:
    if cfg.partition.manifest:
        manifest = read_manifest(cfg.partition.manifest, train.y)
        if len(manifest.assignments) != cfg.partition.num_clients:
            raise ConfigError("manifest client count differs from partition.num_clients")
        return manifest
    return partition(train.y, cfg.partition_spec())


def initial_model(cfg: ExperimentConfig, train: Dataset) -> Network:
    m = cfg.model
    shape = train.sample_shape if m.kind == "cnn" else (int(np.prod(train.sample_shape)),)
    return build_classifier(
        m.kind,
        shape,
        train.class_count,
        hidden=m.hidden,
        channels=m.channels,
        kernel=m.kernel,
        rng=stream_rng(cfg.seed, STREAM_MODEL),
    )


def worker_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, 50, index]).generate_state(1)[0])


def _progress(tag: str, every: int):
    def cb(rec):
        if rec.round % every == 0:
            log.info("%s round %d top1=%.4f loss_mean=%.4f", tag, rec.round, rec.top1, rec.loss_mean)

    return cb


@dataclass
class RunResult:
    log: RunLog
    global_params: np.ndarray
    agent: DrlAgent | None = None
    worker_logs: list[RunLog] = field(default_factory=list)


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: str | Path | None = None,
    progress_every: int = 10,
    on_round: typing.Callable[[FederatedRun], None] | None = None,
) -> RunResult:
    """Execute one configured run; when ``out_dir`` is given, write its artefacts there.

    ``on_round`` is called with the live run after every evaluated round.
    """
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(config_to_text(cfg))

    train, test = load_data(cfg)
    manifest = build_partition(cfg, train)
    model = initial_model(cfg, train)
    rcfg = cfg.round_config()
    if out is not None:
        write_manifest(out / "manifest.tsv", manifest)
        (out / "stats.csv").write_text(stats_to_csv(partition_stats(manifest)))

    agent = None
    worker_logs: list[RunLog] = []
    aggregator = None
    if rcfg.aggregator == "feddrl":
        k = rcfg.participants_per_round
        if cfg.agent.mode == "two_stage":
            rounds = cfg.agent.worker_rounds or rcfg.max_rounds

            def env_factory(i, agg):
                wcfg = dataclasses.replace(rcfg, seed=worker_seed(cfg.seed, i), impact_override=None)
                return FederatedRun(model.clone(), train, manifest.assignments, test, wcfg, agg)

            agent, _, worker_logs = two_stage_train(env_factory, cfg.agent, k, rounds, seed=cfg.seed)
        else:
            agent = DrlAgent(k, cfg.agent, seed=cfg.seed)
        aggregator = FedDrlAggregator(agent, rcfg.max_rounds)

    run = FederatedRun(model, train, manifest.assignments, test, rcfg, aggregator)
    progress = _progress(rcfg.aggregator, progress_every) if progress_every else None

    def callback(rec):
        if progress is not None:
            progress(rec)
        if on_round is not None:
            on_round(run)

    run_log = run.run(callback=callback)

    if out is not None:
        write_run_log(out, run_log)
        model.set_params(run.global_params)
        save_network(out / "model.ckpt", model)
        if agent is not None:
            agent.save(out / "agent")
        for i, wl in enumerate(worker_logs):
            wdir = out / "workers" / f"worker-{i}"
            wdir.mkdir(parents=True, exist_ok=True)
            write_run_log(wdir, wl)
    return RunResult(run_log, np.array(run.global_params), agent, worker_logs)
