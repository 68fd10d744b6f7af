#!/usr/bin/env python
"""
mtbert: a shared transformer encoder with per-task heads.

    mtbert.py synth     --config PLAN --out DIR
    mtbert.py train     --config PLAN --out CKPT [--schedule S] [--resume CKPT]
    mtbert.py eval      --config PLAN --checkpoint CKPT [--predictions FILE]
    mtbert.py bench     --config PLAN --checkpoint CKPT [--n-inputs N]
    mtbert.py gradcheck [--config PLAN] [--ops a,b] [--corrupt OP]
    mtbert.py compare   --config PLAN [--baseline]

Exit codes: 0 ok, 2 configuration, 3 data, 4 numeric, 5 io/format.
"""
import argparse
import asyncio
import sys
from typing import List, Optional

from common.config import RunConfig, apply_overrides, load_run_config
from common.errors import ConfigError, MtbError
from common.tlog import tlog, tlog_to
from runners.bench import BenchRunner
from runners.compare import CompareRunner
from runners.evaluate import EvalRunner
from runners.gradcheck import GradcheckRunner
from runners.synth import SynthRunner
from runners.train import TrainRunner

RUNNERS = {
    "synth": SynthRunner,
    "train": TrainRunner,
    "eval": EvalRunner,
    "bench": BenchRunner,
    "gradcheck": GradcheckRunner,
    "compare": CompareRunner,
}


def _csv(value: str) -> List[str]:
    return [v for v in value.split(",") if v]


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtbert", description=__doc__.split("\n\n")[0].strip())
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run plan")
    common.add_argument("--seed", type=int)
    common.add_argument("--tasks", type=_csv, help="comma-separated subset of plan tasks")
    common.add_argument("--log", help="append structured NDJSON records to this file")
    common.add_argument("--debug", action="store_true")

    s = sub.add_parser("synth", parents=[common], help="write synthetic datasets")
    s.add_argument("--out", required=True, help="output directory")

    t = sub.add_parser("train", parents=[common], help="train and save a checkpoint")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--schedule", choices=["round_robin", "proportional", "single_task"])
    t.add_argument("--outer-loops", type=int)
    t.add_argument("--resume", help="continue from this checkpoint")
    t.add_argument("--max-steps", type=int, help="pause after this many updates")
    t.add_argument("--train-log", help="write per-update NDJSON records here")

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--predictions", help="write per-input NDJSON predictions here")

    b = sub.add_parser("bench", parents=[common], help="shared vs isolated inference")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--n-inputs", type=int)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks")
    g.add_argument("--ops", type=_csv)
    g.add_argument("--corrupt", help="scale one op's backward to prove the checks bite")

    c = sub.add_parser("compare", parents=[common], help="round robin vs proportional updates")
    c.add_argument("--baseline", action="store_true", help="also train single-task models on the same budget")
    return p


def run_config(args: argparse.Namespace) -> RunConfig:
    if args.config:
        cfg = load_run_config(args.config)
    elif args.command == "gradcheck":
        cfg = RunConfig()
    else:
        raise ConfigError("--config is required")
    return apply_overrides(
        cfg,
        seed=args.seed,
        schedule=getattr(args, "schedule", None),
        outer_loops=getattr(args, "outer_loops", None),
        tasks=args.tasks if args.command not in ("eval", "gradcheck") else None,
    )


def main(argv: Optional[List[str]] = None) -> int:
    args = parser().parse_args(argv)
    try:
        cfg = run_config(args)
        tlog_to(args.log, cfg.logging.cloud, cfg.logging.name)
        data = {**vars(args), "config": cfg}
        runner = RUNNERS[args.command](data, debug=args.debug)
        return 0 if asyncio.run(runner.run()) else 1
    except MtbError as e:
        tlog(f"[ERROR] {type(e).__name__}: {e}", error=type(e).__name__, exit_code=e.exit_code)
        return e.exit_code
    finally:
        tlog_to(None)


if __name__ == "__main__":
    sys.exit(main())
