"""Sparsity objective and the warm-up schedule for its weight."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from dualprune import functional as F
from dualprune.tensor import Tensor


@dataclass(frozen=True)
class PruneSchedule:
    warmup_epochs: int = 8
    lambda_sparse: float = 0.1
    total_epochs: int = 20
    finetune_epochs: int = 10

    def __post_init__(self):
        if self.warmup_epochs < 0 or self.total_epochs < 0 or self.finetune_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.warmup_epochs > self.total_epochs:
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) exceeds total_epochs ({self.total_epochs})")
        if not self.lambda_sparse >= 0:
            raise ValueError(f"lambda_sparse must be >= 0, got {self.lambda_sparse}")


# full-scale settings: 40 warm-up epochs out of 100, then 50 fine-tuning epochs
FULL_SCHEDULE = PruneSchedule(warmup_epochs=40, lambda_sparse=0.1, total_epochs=100, finetune_epochs=50)
DESK_SCHEDULE = PruneSchedule()


def lambda_schedule(epoch: int, schedule: PruneSchedule) -> float:
    """Step schedule: 0 for zero-based epochs below the warm-up, then ``lambda_sparse``."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return 0.0 if epoch < schedule.warmup_epochs else schedule.lambda_sparse


def sparsity_loss(masks: Sequence[Tensor]) -> Tensor:
    """Fraction of active channels over all prunable layers.

    Gradients reach gamma and tau only through the masks' straight-through
    backward.
    """
    masks = [m if isinstance(m, Tensor) else Tensor(m) for m in masks]
    total = sum(m.size for m in masks)
    if total == 0:
        raise ValueError("nothing to prune: no masked BatchNorm channels")
    acc = F.sum(masks[0])
    for m in masks[1:]:
        acc = F.add(acc, F.sum(m))
    return F.scale(acc, 1.0 / total)


def total_loss(task: Tensor | float, sparsity: Tensor | float, lambda_sparse: float) -> Tensor | float:
    return task + lambda_sparse * sparsity
