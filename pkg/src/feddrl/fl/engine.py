"""The synchronous round loop: sample, broadcast, train locally, aggregate."""

from __future__ import annotations

import threading
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Protocol, Sequence

import numpy as np

from feddrl.data.datasets import Dataset
from feddrl.fl.core import (
    ClientReport,
    RoundConfig,
    aggregate_weighted,
    check_impacts,
    evaluate_top1,
    fedavg_impacts,
)
from feddrl.metrics import RoundRecord, RunLog
from feddrl.nn import Network, mean_loss, train_epochs

# Independent RNG streams derived from the run seed, so that changing one
# consumer (e.g. the agent's exploration) never shifts another's draws.
STREAM_SAMPLING = 0
STREAM_MODEL = 1
STREAM_CLIENT = 2
STREAM_AGENT = 3


def stream_rng(seed: int, stream: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, *extra])


class Aggregator(Protocol):
    name: str

    def impacts(self, reports: Sequence[ClientReport], round_index: int) -> np.ndarray: ...

    def end_round(self, reports: Sequence[ClientReport], alpha: np.ndarray, round_index: int) -> None: ...


class FedAvgAggregator:
    """Sample-count weighting; FedProx uses it too (its change is client-side)."""

    def __init__(self, name: str = "fedavg"):
        self.name = name

    def impacts(self, reports, round_index):
        return fedavg_impacts(reports)

    def end_round(self, reports, alpha, round_index):
        pass


class FederatedRun:
    """One federated training trajectory over a fixed client partition.

    ``shards`` lists each client's sample indices into ``train``. The global
    model starts from ``model``'s current parameters.
    """

    def __init__(
        self,
        model: Network,
        train: Dataset,
        shards: Sequence[np.ndarray],
        test: Dataset,
        cfg: RoundConfig,
        aggregator: Aggregator | None = None,
    ):
        if len(shards) != cfg.total_clients:
            raise ValueError(f"{len(shards)} shards for {cfg.total_clients} clients")
        for cid, idx in enumerate(shards):
            if len(idx) == 0:
                raise ValueError(f"client {cid} has an empty shard")
        self.cfg = cfg
        self.model = model
        self.train_set = train
        self.test_set = test
        self.shards = [np.asarray(s, dtype=np.int64) for s in shards]
        self.aggregator = aggregator or FedAvgAggregator(cfg.aggregator)
        self.global_params = model.get_params()
        self.round = 0
        self.log = RunLog()
        self._sampler = stream_rng(cfg.seed, STREAM_SAMPLING)
        self._sgd = cfg.local_sgd()
        self._local = threading.local()
        self._pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def _worker_net(self) -> Network:
        net = getattr(self._local, "net", None)
        if net is None:
            net = self._local.net = self.model.clone()
        return net

    def sample_clients(self) -> np.ndarray:
        n, k = self.cfg.total_clients, self.cfg.participants_per_round
        return self._sampler.choice(n, size=k, replace=False)

    def local_update(self, client_id: int, round_index: int) -> ClientReport:
        net = self._worker_net()
        idx = self.shards[client_id]
        x, y = self.train_set.x[idx], self.train_set.y[idx]
        net.set_params(self.global_params)
        before = mean_loss(net, x, y)
        rng = stream_rng(self.cfg.seed, STREAM_CLIENT, round_index, int(client_id))
        anchor = self.global_params if self._sgd.proximal_mu > 0 else None
        train_epochs(net, x, y, self._sgd, rng, anchor)
        after = mean_loss(net, x, y)
        return ClientReport(int(client_id), before, after, len(idx), net.get_params())

    def run_round(self) -> tuple[np.ndarray, list[ClientReport]]:
        t = self.round + 1
        chosen = self.sample_clients()
        if self._pool is None:
            reports = [self.local_update(c, t) for c in chosen]
        else:
            reports = list(self._pool.map(lambda c: self.local_update(c, t), chosen))

        start = time.perf_counter()
        alpha = self.aggregator.impacts(reports, t)
        impact_seconds = time.perf_counter() - start
        if self.cfg.impact_override == "fixed:n_k/n":
            alpha = fedavg_impacts(reports)
        alpha = check_impacts(alpha, len(reports))

        start = time.perf_counter()
        new_global = aggregate_weighted(reports, alpha)
        aggregation_seconds = time.perf_counter() - start

        self.global_params = new_global
        self.global_params.setflags(write=False)
        top1 = evaluate_top1(self.model, new_global, self.test_set)
        self.aggregator.end_round(reports, alpha, t)
        self.round = t
        self.log.append(
            RoundRecord(
                round=t,
                top1=top1,
                losses_before=np.array([r.loss_before for r in reports]),
                impacts=alpha.copy(),
                clients=[r.client_id for r in reports],
                losses_after=np.array([r.loss_after for r in reports]),
                impact_seconds=impact_seconds,
                aggregation_seconds=aggregation_seconds,
            )
        )
        return new_global, reports

    def run(self, rounds: int | None = None, callback: Callable[[RoundRecord], None] | None = None) -> RunLog:
        rounds = self.cfg.max_rounds if rounds is None else rounds
        try:
            for _ in range(rounds):
                self.run_round()
                if callback is not None:
                    callback(self.log.records[-1])
        finally:
            self.close()
        return self.log
