"""Channel pruning: soft (learned masks) and hard (structural removal)."""

from dualprune.pruning.groups import PruneGroup, Reason, build_dependency_graph, zero_channels
from dualprune.pruning.hard import LayerPruneRecord, PruneError, PruneReport, hard_prune, select_removable
from dualprune.pruning.schedule import (
    DESK_SCHEDULE,
    FULL_SCHEDULE,
    PruneSchedule,
    lambda_schedule,
    sparsity_loss,
    total_loss,
)
from dualprune.pruning.train import DivergenceError, EpochMetrics, evaluate, fine_tune, soft_prune_epoch, train_step

__all__ = [
    "DESK_SCHEDULE",
    "FULL_SCHEDULE",
    "DivergenceError",
    "EpochMetrics",
    "LayerPruneRecord",
    "PruneError",
    "PruneGroup",
    "PruneReport",
    "PruneSchedule",
    "Reason",
    "build_dependency_graph",
    "evaluate",
    "fine_tune",
    "hard_prune",
    "lambda_schedule",
    "select_removable",
    "soft_prune_epoch",
    "sparsity_loss",
    "total_loss",
    "train_step",
    "zero_channels",
]
