"""Ranking-based group identification on a user/group/item graph.

Personalized embeddings are propagated over the tripartite graph, and users
additionally receive attention-weighted messages from groups and items they
are not connected to, with attention derived from a factorized relatedness
matrix of contextual embeddings.
"""

from .graph import DataError, DatasetSplit, TripartiteGraph, cap_user_groups, load_dataset, split_per_user
from .model import (
    Aggregation,
    HyperParams,
    Merge,
    ModelParams,
    PAMode,
    Partition,
    backward,
    forward,
    init_params,
)
from .numeric import NumericError
from .training import TrainConfig, fit
from .evaluation import EvalReport, evaluate

__version__ = "0.1.0"

__all__ = [
    "Aggregation", "DataError", "DatasetSplit", "EvalReport", "HyperParams", "Merge", "ModelParams",
    "NumericError", "PAMode", "Partition", "TrainConfig", "TripartiteGraph", "backward", "cap_user_groups",
    "evaluate", "fit", "forward", "init_params", "load_dataset", "split_per_user",
]
