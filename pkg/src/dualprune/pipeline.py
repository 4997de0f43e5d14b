"""Pipeline stages: gen-data -> train (soft pruning) -> prune (hard) -> finetune -> report.

Each stage reads its inputs from and writes its outputs to one run directory::

    data/                    dataset arrays + dataset.json
    checkpoints/train_eNNN.ckpt   per-epoch training checkpoints (resumable)
    train.ckpt, train_metrics.jsonl
    pruned.ckpt, prune_report.json, complexity_before.json, complexity_after.json
    finetune.ckpt, finetune_metrics.jsonl
    report.json / report.md
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

from dualprune import data as D
from dualprune.checkpoint import Checkpoint, CheckpointError, from_graph, load_checkpoint
from dualprune.complexity import count_macs, emit_report
from dualprune.config import RunConfig
from dualprune.nn.graph import NetworkGraph
from dualprune.nn.layers import build_hourglass
from dualprune.optim import Adam
from dualprune.pruning.groups import build_dependency_graph
from dualprune.pruning.hard import hard_prune
from dualprune.pruning.schedule import PruneSchedule
from dualprune.pruning.train import evaluate, fine_tune, soft_prune_epoch

log = logging.getLogger(__name__)

FINETUNE_ORDER_OFFSET = 100_000


class RunPaths:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.data = self.root / "data"
        self.checkpoints = self.root / "checkpoints"
        self.train_ckpt = self.root / "train.ckpt"
        self.train_metrics = self.root / "train_metrics.jsonl"
        self.pruned_ckpt = self.root / "pruned.ckpt"
        self.prune_report = self.root / "prune_report.json"
        self.complexity_before = self.root / "complexity_before.json"
        self.complexity_after = self.root / "complexity_after.json"
        self.finetune_ckpt = self.root / "finetune.ckpt"
        self.finetune_metrics = self.root / "finetune_metrics.jsonl"

    def epoch_ckpt(self, epoch: int) -> Path:
        return self.checkpoints / f"train_e{epoch:03d}.ckpt"


def build_model(cfg: RunConfig) -> NetworkGraph:
    m = cfg.model
    return build_hourglass(
        m.channels,
        m.bottleneck_blocks,
        m.use_separable,
        m.masked_bn,
        kernel_size=m.kernel_size,
        gamma_init=m.gamma_init,
        tau_init=cfg.tau_init,
        epsilon_band=cfg.epsilon_band,
        seed=cfg.seed,
    )


def make_optimizer(cfg: RunConfig, graph: NetworkGraph) -> Adam:
    o = cfg.optimizer
    return Adam(graph.named_parameters(), lr=o.learning_rate, betas=(o.beta1, o.beta2))


def _write_jsonl(path: Path, rows: list[dict]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_jsonl(path: Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _load_stage(path: Path, cfg: RunConfig, stage: str) -> Checkpoint:
    if not path.exists():
        raise CheckpointError(f"{path} not found; run the '{stage}' stage first")
    ckpt = load_checkpoint(path)
    ckpt.check_config(cfg.hash())
    return ckpt


def gen_data(cfg: RunConfig) -> Path:
    d = cfg.data
    ds = D.generate(d.dataset_size, d.image_size, d.blob_count, d.noise_level, d.val_size, cfg.seed)
    return D.save(ds, RunPaths(Path(cfg.output_dir)).data, meta={"seed": cfg.seed, **cfg.to_dict()["data"]})


def train(cfg: RunConfig, resume: str | Path | None = None) -> list[dict]:
    """Soft-pruning training for ``schedule.total_epochs``; checkpoints after every epoch."""
    paths = RunPaths(Path(cfg.output_dir))
    ds = D.load(paths.data)
    graph, start, history = build_model(cfg), 0, []
    optimizer = make_optimizer(cfg, graph)
    if resume is not None:
        ckpt = load_checkpoint(resume)
        ckpt.check_config(cfg.hash())
        graph = ckpt.graph()
        optimizer = make_optimizer(cfg, graph)
        optimizer.load_state(ckpt.arrays, ckpt.meta["adam_t"])
        start = ckpt.meta["epoch"]
        if paths.train_metrics.exists():
            history = [r for r in read_jsonl(paths.train_metrics) if r["epoch"] < start]
    paths.checkpoints.mkdir(parents=True, exist_ok=True)
    for epoch in range(start, cfg.schedule.total_epochs):
        batches = D.iterate_batches(ds.train_noisy, ds.train_clean, cfg.data.batch_size, cfg.seed, epoch)
        m = soft_prune_epoch(graph, batches, optimizer, epoch, cfg.schedule).to_dict()
        m["val_loss"] = evaluate(graph, ds.val_noisy, ds.val_clean)
        history.append(m)
        _write_jsonl(paths.train_metrics, history)
        meta = {"stage": "train", "epoch": epoch + 1, "adam_t": optimizer.t}
        from_graph(graph, cfg.hash(), meta, optimizer.state_arrays()).save(paths.epoch_ckpt(epoch + 1))
    meta = {"stage": "train", "epoch": cfg.schedule.total_epochs, "adam_t": optimizer.t}
    from_graph(graph, cfg.hash(), meta).save(paths.train_ckpt)
    return history


def prune(cfg: RunConfig) -> dict:
    paths = RunPaths(Path(cfg.output_dir))
    graph = _load_stage(paths.train_ckpt, cfg, "train").graph()
    groups = build_dependency_graph(graph)
    pruned, report = hard_prune(graph, groups)
    size = (cfg.data.image_size, cfg.data.image_size)
    before, after = count_macs(graph, size), count_macs(pruned, size)
    paths.complexity_before.write_text(emit_report(before, "json"))
    paths.complexity_after.write_text(emit_report(after, "json"))
    paths.prune_report.write_text(report.to_json() + "\n")
    from_graph(pruned, cfg.hash(), {"stage": "prune"}).save(paths.pruned_ckpt)
    summary = {
        "removed_fraction": report.removed_fraction,
        "params_before": before.params,
        "params_after": after.params,
        "kmacs_per_pixel_before": before.kmacs_per_pixel,
        "kmacs_per_pixel_after": after.kmacs_per_pixel,
    }
    log.info("pruned %.1f%% of channels; params %d -> %d", 100 * report.removed_fraction, before.params, after.params)
    return summary


def finetune(cfg: RunConfig) -> list[dict]:
    paths = RunPaths(Path(cfg.output_dir))
    ds = D.load(paths.data)
    graph = _load_stage(paths.pruned_ckpt, cfg, "prune").graph()
    optimizer = make_optimizer(cfg, graph)
    rows = [
        {
            "stage": "finetune",
            "epoch": -1,
            "task_loss": None,
            "val_loss": evaluate(graph, ds.val_noisy, ds.val_clean),
        }
    ]

    def batches(epoch):
        return D.iterate_batches(
            ds.train_noisy, ds.train_clean, cfg.data.batch_size, cfg.seed, FINETUNE_ORDER_OFFSET + epoch
        )

    def record(m):
        row = m.to_dict()
        row["val_loss"] = evaluate(graph, ds.val_noisy, ds.val_clean)
        rows.append(row)
        _write_jsonl(paths.finetune_metrics, rows)

    _write_jsonl(paths.finetune_metrics, rows)
    fine_tune(graph, batches, cfg.schedule.finetune_epochs, optimizer, on_epoch=record)
    from_graph(graph, cfg.hash(), {"stage": "finetune"}).save(paths.finetune_ckpt)
    return rows


def report(cfg: RunConfig, fmt: str = "markdown") -> str:
    """Complexity of the unpruned model, and of the pruned one when it exists."""
    paths = RunPaths(Path(cfg.output_dir))
    size = (cfg.data.image_size, cfg.data.image_size)
    if paths.train_ckpt.exists():
        before_graph = _load_stage(paths.train_ckpt, cfg, "train").graph()
    else:
        before_graph = build_model(cfg)
    before = count_macs(before_graph, size)
    after = None
    if paths.pruned_ckpt.exists():
        after = count_macs(_load_stage(paths.pruned_ckpt, cfg, "prune").graph(), size)
    if fmt == "json":
        doc = {"before": json.loads(emit_report(before, "json"))}
        if after is not None:
            doc["after"] = json.loads(emit_report(after, "json"))
        text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    else:
        text = "## Unpruned\n\n" + emit_report(before, "markdown")
        if after is not None:
            text += "\n## Pruned\n\n" + emit_report(after, "markdown")
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    (Path(cfg.output_dir) / f"report.{'json' if fmt == 'json' else 'md'}").write_text(text)
    return text


def run_all(cfg: RunConfig) -> dict:
    gen_data(cfg)
    train(cfg)
    summary = prune(cfg)
    rows = finetune(cfg)
    summary["val_loss_after_prune"] = rows[0]["val_loss"]
    summary["val_loss_final"] = rows[-1]["val_loss"]
    return summary


def train_baseline(cfg: RunConfig) -> float:
    """Unmasked model with the same architecture, trained for train+finetune epochs.

    Returns the final validation loss. Uses the same data and batch orders as
    the pruning pipeline.
    """
    paths = RunPaths(Path(cfg.output_dir))
    ds = D.load(paths.data)
    m = cfg.model
    graph = build_hourglass(
        m.channels,
        m.bottleneck_blocks,
        m.use_separable,
        masked_bn=False,
        kernel_size=m.kernel_size,
        gamma_init=m.gamma_init,
        seed=cfg.seed,
    )
    optimizer = make_optimizer(cfg, graph)
    plain = PruneSchedule(0, 0.0, cfg.schedule.total_epochs, 0)
    for epoch in range(cfg.schedule.total_epochs):
        batches = D.iterate_batches(ds.train_noisy, ds.train_clean, cfg.data.batch_size, cfg.seed, epoch)
        soft_prune_epoch(graph, batches, optimizer, epoch, plain)
    for epoch in range(cfg.schedule.finetune_epochs):
        batches = D.iterate_batches(
            ds.train_noisy, ds.train_clean, cfg.data.batch_size, cfg.seed, FINETUNE_ORDER_OFFSET + epoch
        )
        soft_prune_epoch(graph, batches, optimizer, epoch, plain)
    return evaluate(graph, ds.val_noisy, ds.val_clean)


def relative_gap(pruned_loss: float, baseline_loss: float) -> float:
    return (pruned_loss - baseline_loss) / baseline_loss


__all__ = [
    "RunPaths",
    "build_model",
    "finetune",
    "gen_data",
    "make_optimizer",
    "prune",
    "read_jsonl",
    "relative_gap",
    "report",
    "run_all",
    "train",
    "train_baseline",
]
