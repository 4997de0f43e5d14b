"""Command-line driver.

    dualprune gen-data --config run.json
    dualprune train    --config run.json [--resume checkpoints/train_e005.ckpt]
    dualprune prune    --config run.json
    dualprune finetune --config run.json
    dualprune report   --config run.json --format markdown
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from dualprune import pipeline
from dualprune.checkpoint import CheckpointError
from dualprune.config import ConfigError, RunConfig
from dualprune.pruning.hard import PruneError
from dualprune.pruning.train import DivergenceError
from dualprune.tensor import ShapeError

log = logging.getLogger("dualprune")


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["output_dir"] = args.out
    if changes:
        cfg = dataclasses.replace(cfg, **changes)
        cfg.validate()
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualprune", description=__doc__.splitlines()[0] if __doc__ else None)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train", "prune", "finetune", "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration (defaults are used when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the config output_dir")
        p.add_argument("--format", choices=("json", "markdown"), default="markdown")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            p.add_argument("--resume", help="continue from a per-epoch training checkpoint")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        cfg = _load_config(args)
        if args.command == "gen-data":
            print(pipeline.gen_data(cfg))
        elif args.command == "train":
            history = pipeline.train(cfg, resume=args.resume)
            if history:
                print(json.dumps(history[-1], sort_keys=True))
        elif args.command == "prune":
            print(json.dumps(pipeline.prune(cfg), indent=2, sort_keys=True))
        elif args.command == "finetune":
            rows = pipeline.finetune(cfg)
            print(json.dumps(rows[-1], sort_keys=True))
        elif args.command == "report":
            sys.stdout.write(pipeline.report(cfg, args.format))
    except (ConfigError, CheckpointError, FileNotFoundError, PruneError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
