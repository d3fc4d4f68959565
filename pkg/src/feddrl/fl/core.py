"""Round-level types and the server-side weighting/aggregation maths."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from feddrl.data.datasets import Dataset
from feddrl.nn import Network, SgdConfig, predict

AGGREGATORS = ("fedavg", "fedprox", "feddrl")
OVERRIDES = ("fixed:n_k/n",)


@dataclass(frozen=True)
class ClientReport:
    """What one participant sends back after local training."""

    client_id: int
    loss_before: float
    loss_after: float
    n_samples: int
    params: np.ndarray = field(repr=False)

    def __post_init__(self):
        for v in (self.loss_before, self.loss_after):
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"client {self.client_id}: loss {v} is not finite and nonnegative")
        if self.n_samples <= 0:
            raise ValueError(f"client {self.client_id}: empty shard")
        if self.params.flags.writeable:
            p = self.params.copy()
            p.setflags(write=False)
            object.__setattr__(self, "params", p)


@dataclass(frozen=True)
class RoundConfig:
    total_clients: int
    participants_per_round: int = 10
    max_rounds: int = 1000
    sgd: SgdConfig = SgdConfig()
    aggregator: str = "fedavg"
    seed: int = 0
    proximal_mu: float = 0.01
    impact_override: str | None = None
    threads: int = 1

    def __post_init__(self):
        if self.total_clients < 1:
            raise ValueError("total_clients must be >= 1")
        if not 1 <= self.participants_per_round <= self.total_clients:
            raise ValueError(
                f"participants_per_round={self.participants_per_round} must lie in [1, {self.total_clients}]"
            )
        if self.max_rounds < 0:
            raise ValueError("max_rounds must be >= 0")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}")
        if self.impact_override not in (None, *OVERRIDES):
            raise ValueError(f"unknown impact override {self.impact_override!r}")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")
        if self.proximal_mu < 0:
            raise ValueError("proximal_mu must be nonnegative")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def local_sgd(self) -> SgdConfig:
        """Client solver settings: the proximal term is active only for FedProx."""
        mu = self.proximal_mu if self.aggregator == "fedprox" else 0.0
        return SgdConfig(self.sgd.learning_rate, self.sgd.batch_size, self.sgd.epochs, mu)


def check_impacts(alpha, k: int | None = None, tol: float = 1e-9) -> np.ndarray:
    """Validate an impact vector: nonnegative entries summing to one."""
    a = np.asarray(alpha, dtype=np.float64)
    if a.ndim != 1 or a.size == 0:
        raise ValueError("impact vector must be a nonempty 1-d array")
    if k is not None and a.size != k:
        raise ValueError(f"impact vector has {a.size} entries, expected {k}")
    if not np.all(np.isfinite(a)) or np.any(a < 0):
        raise ValueError("impacts must be finite and nonnegative")
    if abs(a.sum() - 1.0) > tol:
        raise ValueError(f"impacts sum to {a.sum()!r}, not 1")
    return a


def fedavg_impacts(reports: Sequence[ClientReport]) -> np.ndarray:
    if not reports:
        raise ValueError("no reports")
    n = np.array([r.n_samples for r in reports], dtype=np.float64)
    return n / n.sum()


def aggregate_weighted(reports: Sequence[ClientReport], alpha) -> np.ndarray:
    """``sum_k alpha_k * w_k`` over the reported parameter vectors."""
    if len(reports) != len(np.atleast_1d(alpha)):
        raise ValueError(f"{len(reports)} reports but {len(np.atleast_1d(alpha))} impacts")
    alpha = check_impacts(alpha)
    size = reports[0].params.size
    if any(r.params.size != size for r in reports):
        raise ValueError("clients reported parameter vectors of different lengths")
    return alpha @ np.stack([r.params for r in reports])


def evaluate_top1(model: Network, params: np.ndarray | None, testset: Dataset) -> float:
    """Fraction of test samples whose argmax logit equals the label."""
    if len(testset) == 0:
        raise ValueError("empty test set")
    if params is not None:
        model.set_params(params)
    hits = int(np.count_nonzero(predict(model, testset.x) == testset.y))
    return hits / len(testset)
