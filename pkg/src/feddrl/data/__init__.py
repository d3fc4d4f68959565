from feddrl.data.datasets import (
    Dataset,
    export_mnist_subset,
    load_idx_dataset,
    make_synthetic,
    read_idx,
    write_idx,
)
from feddrl.data.partition import (
    METHODS,
    PartitionError,
    PartitionManifest,
    PartitionSpec,
    StatsReport,
    cluster_layout,
    manifest_from_text,
    manifest_to_text,
    partition,
    partition_clustered,
    partition_pareto,
    partition_shards,
    partition_stats,
    read_manifest,
    stats_to_csv,
    write_manifest,
)

__all__ = [
    "METHODS",
    "Dataset",
    "PartitionError",
    "PartitionManifest",
    "PartitionSpec",
    "StatsReport",
    "cluster_layout",
    "export_mnist_subset",
    "load_idx_dataset",
    "make_synthetic",
    "manifest_from_text",
    "manifest_to_text",
    "partition",
    "partition_clustered",
    "partition_pareto",
    "partition_shards",
    "partition_stats",
    "read_idx",
    "read_manifest",
    "stats_to_csv",
    "write_idx",
    "write_manifest",
]
