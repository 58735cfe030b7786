"""Cascaded multi-behavior graph-convolutional recommender.

Per-behavior embedding propagation chained through generated per-node
feature transforms, with factor-block disentanglement enforced by a
distance-correlation penalty and factor-level attention at prediction
time. Trained with pairwise ranking on the target behavior; evaluated
leave-one-out with Recall@N / NDCG@N.
"""

__version__ = "0.1.0"

from .autodiff import ShapeError, Tape, Tensor, xavier_init
from .data import (
    BehaviorGraph,
    DataError,
    InteractionDataset,
    RawInteraction,
    build_graph,
    build_graphs,
    ingest,
    load_cache,
    parse_tsv,
    read_tsv,
    save_cache,
    save_split_manifest,
    split_leave_one_out,
)
from .disentangle import dcor, independence_loss, mean_block_dcor, split_blocks
from .evaluate import RankingReport, compare_runs, evaluate
from .gcn import combine, encode_behavior, propagate
from .model import (
    CascadeOutput,
    ModelParams,
    forward_cascade,
    init_params,
    params_from_arrays,
)
from .optim import AdamState, adam_step
from .train import ConfigError, TrainingConfig, batch_loss, bpr_loss, total_loss, train

__all__ = [
    "AdamState",
    "BehaviorGraph",
    "CascadeOutput",
    "ConfigError",
    "DataError",
    "InteractionDataset",
    "ModelParams",
    "RankingReport",
    "RawInteraction",
    "ShapeError",
    "Tape",
    "Tensor",
    "TrainingConfig",
    "adam_step",
    "batch_loss",
    "bpr_loss",
    "build_graph",
    "build_graphs",
    "combine",
    "compare_runs",
    "dcor",
    "encode_behavior",
    "evaluate",
    "forward_cascade",
    "independence_loss",
    "ingest",
    "init_params",
    "load_cache",
    "mean_block_dcor",
    "params_from_arrays",
    "parse_tsv",
    "propagate",
    "read_tsv",
    "save_cache",
    "save_split_manifest",
    "split_blocks",
    "split_leave_one_out",
    "total_loss",
    "train",
    "xavier_init",
]
