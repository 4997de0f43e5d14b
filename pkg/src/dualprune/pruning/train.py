"""Soft-pruning training epochs, fine-tuning and evaluation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Iterable

import numpy as np

from dualprune import functional as F
from dualprune.nn.graph import NetworkGraph
from dualprune.optim import Adam
from dualprune.pruning.schedule import PruneSchedule, lambda_schedule, sparsity_loss, total_loss
from dualprune.tensor import NumericError, Tensor, no_grad

log = logging.getLogger(__name__)

Batches = Iterable[tuple[np.ndarray, np.ndarray]]


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, batch: int, detail: str = ""):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}" + (f": {detail}" if detail else ""))
        self.epoch = epoch
        self.batch = batch


@dataclass
class EpochMetrics:
    stage: str
    epoch: int
    task_loss: float
    sparsity: float
    active_fraction: float
    lambda_sparse: float
    mean_tau: float

    def to_dict(self) -> dict:
        return asdict(self)


def _mean_tau(graph: NetworkGraph) -> float:
    taus = [float(n.bn.tau.data[0]) for n in graph.bn_nodes(masked_only=True)]
    return float(np.mean(taus)) if taus else 0.0


def train_step(graph: NetworkGraph, x: np.ndarray, y: np.ndarray, optimizer: Adam, lam: float) -> float:
    optimizer.zero_grad()
    out = graph.forward(Tensor(x, dtype=graph.dtype), training=True)
    task = F.mse_loss(out, Tensor(y, dtype=out.dtype))
    loss = task
    if graph.bn_nodes(masked_only=True):
        loss = total_loss(task, sparsity_loss(graph.mask_tensors()), lam)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError("loss is not finite")
    loss.backward()
    optimizer.step()
    graph.clamp_thresholds()
    return task.item()


def soft_prune_epoch(
    graph: NetworkGraph, batches: Batches, optimizer: Adam, epoch: int, schedule: PruneSchedule
) -> EpochMetrics:
    """One epoch against task loss + lambda(epoch) * sparsity, architecture untouched."""
    lam = lambda_schedule(epoch, schedule)
    losses = []
    for i, (x, y) in enumerate(batches):
        try:
            losses.append(train_step(graph, x, y, optimizer, lam))
        except NumericError as exc:
            raise DivergenceError(epoch, i, str(exc)) from exc
    active = graph.active_fraction()
    m = EpochMetrics("train", epoch, float(np.mean(losses)), active, active, lam, _mean_tau(graph))
    log.info("train epoch %d: loss %.6f active %.3f lambda %.3g", epoch, m.task_loss, m.active_fraction, lam)
    return m


def fine_tune(
    graph: NetworkGraph,
    batches_for_epoch: Callable[[int], Batches],
    epochs: int,
    optimizer: Adam,
    on_epoch: Callable[[EpochMetrics], None] | None = None,
) -> list[EpochMetrics]:
    """Plain task-loss training of a hard-pruned (mask-free) graph."""
    if graph.bn_nodes(masked_only=True):
        raise ValueError("fine_tune expects a hard-pruned graph without masked BatchNorm layers")
    history = []
    for epoch in range(epochs):
        losses = []
        for i, (x, y) in enumerate(batches_for_epoch(epoch)):
            try:
                losses.append(train_step(graph, x, y, optimizer, 0.0))
            except NumericError as exc:
                raise DivergenceError(epoch, i, str(exc)) from exc
        m = EpochMetrics("finetune", epoch, float(np.mean(losses)), 1.0, 1.0, 0.0, 0.0)
        history.append(m)
        if on_epoch:
            on_epoch(m)
        log.info("finetune epoch %d: loss %.6f", epoch, m.task_loss)
    return history


def evaluate(graph: NetworkGraph, noisy: np.ndarray, clean: np.ndarray, batch_size: int = 32) -> float:
    """Mean squared error in inference mode, averaged over all pixels."""
    total, count = 0.0, 0
    with no_grad():
        for start in range(0, len(noisy), batch_size):
            x, y = noisy[start : start + batch_size], clean[start : start + batch_size]
            out = graph.forward(Tensor(x, dtype=graph.dtype), training=False)
            diff = out.data.astype(np.float64) - y
            total += float((diff * diff).sum())
            count += diff.size
    return total / count
