"""Approximate k-nearest-neighbor graph construction with NN-Descent.

Typical use::

    from gnnd import BuildParams, construct, brute_force_graph, recall_at_k
    g = construct(x, "l2", BuildParams(k=20, p=10))
"""

from .bench import BenchReport, run_ablation
from .builder import (
    BuildParams,
    DistanceTable,
    IterationStats,
    SampleLists,
    construct,
    get_nearest_object,
    init_random_graph,
    local_join,
    pair_index,
    parallel_sample,
    run_iterations,
    update_step,
)
from .errors import DomainError, FormatError, GnndError, UsageError
from .evaluate import brute_force_graph, phi, recall_at_k
from .graph import Dataset, KnnGraph
from .io import read_graph, read_ground_truth, read_vecs, write_graph, write_ground_truth, write_vecs
from .knnlist import Flag, InsertOutcome, NeighborEntry, SegmentedKnnList
from .merge import MergeContext, ggm_finalize, ggm_init, ggm_merge, ggm_refine
from .metrics import Metric, metric_eval
from .shards import ShardManifest, build_shards, export_graph, ingest, merge_all, partition, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "BenchReport", "BuildParams", "Dataset", "DistanceTable", "DomainError", "Flag", "FormatError",
    "GnndError", "InsertOutcome", "IterationStats", "KnnGraph", "MergeContext", "Metric",
    "NeighborEntry", "SampleLists", "SegmentedKnnList", "ShardManifest", "UsageError",
    "brute_force_graph", "build_shards", "construct", "export_graph", "get_nearest_object",
    "ggm_finalize", "ggm_init", "ggm_merge", "ggm_refine", "ingest", "init_random_graph",
    "local_join", "merge_all", "metric_eval", "pair_index", "parallel_sample", "partition", "phi",
    "read_graph", "read_ground_truth", "read_vecs", "recall_at_k", "run_ablation", "run_iterations",
    "run_pipeline", "update_step", "write_graph", "write_ground_truth", "write_vecs",
]
