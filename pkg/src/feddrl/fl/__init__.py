from feddrl.fl.core import (
    AGGREGATORS,
    ClientReport,
    RoundConfig,
    aggregate_weighted,
    check_impacts,
    evaluate_top1,
    fedavg_impacts,
)
from feddrl.fl.engine import (
    STREAM_AGENT,
    STREAM_CLIENT,
    STREAM_MODEL,
    STREAM_SAMPLING,
    Aggregator,
    FedAvgAggregator,
    FederatedRun,
    stream_rng,
)

__all__ = [
    "AGGREGATORS",
    "STREAM_AGENT",
    "STREAM_CLIENT",
    "STREAM_MODEL",
    "STREAM_SAMPLING",
    "Aggregator",
    "ClientReport",
    "FedAvgAggregator",
    "FederatedRun",
    "RoundConfig",
    "aggregate_weighted",
    "check_impacts",
    "evaluate_top1",
    "fedavg_impacts",
    "stream_rng",
]
