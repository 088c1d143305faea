"""Command-line entry point: ``raml <command> [--config PATH] [--out DIR] [--seed N] [--profile NAME]``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import PROFILES, ExperimentConfig
from .errors import ConfigError, NumericError, RamlError

EXIT_OK, EXIT_FAILURE, EXIT_MISSING, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3, 4

COMMANDS = {
    "gen-data": pipeline.cmd_gen_data,
    "train-teacher": pipeline.cmd_train_teacher,
    "distill": pipeline.cmd_distill,
    "eval": pipeline.cmd_eval,
    "tradeoff": pipeline.cmd_tradeoff,
    "ablate": pipeline.cmd_ablate,
    "flops": pipeline.cmd_flops,
}


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="flat key=value config file")
    parser.add_argument("--out", default=default, help="run directory (default: runs)")
    parser.add_argument("--seed", type=int, default=default,
                        help="sets dataset.seed and teacher.seed, and makes the distill and ablate seed lists just N")
    parser.add_argument("--profile", choices=sorted(PROFILES), default=argparse.SUPPRESS if suppress else "desk")
    parser.add_argument("-v", "--verbose", action="store_true", default=default)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="raml", description=__doc__)
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        _global_flags(p, suppress=True)
        if name == "tradeoff":
            p.add_argument("--results", help="results CSV (default: <out>/results.csv)")
    return parser


def load_config(args) -> ExperimentConfig:
    overrides = {}
    if args.seed is not None:
        for key in ("dataset.seed", "teacher.seed", "distill.seeds", "ablate.seeds"):
            overrides[key] = str(args.seed)
    return ExperimentConfig.load(args.config, profile=args.profile, overrides=overrides, output_dir=args.out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args)
        if args.command == "tradeoff":
            out = pipeline.cmd_tradeoff(cfg, getattr(args, "results", None))
        else:
            out = COMMANDS[args.command](cfg)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (RamlError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    _report(args.command, out)
    return EXIT_OK


def _report(command: str, out) -> None:
    if command == "flops":
        print("scale,resolution,flops")
        for scale, res, flops in out:
            print(f"{scale:g},{res},{flops}")
    elif isinstance(out, list):
        for path in out:
            print(path)
    else:
        print(out)


if __name__ == "__main__":
    sys.exit(main())
