"""``varcpo`` command line: train, eval, plot and selftest.

Settings come from the config file only; environment variables are not read.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS,
                   help="suppress progress output (results are still printed)")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="varcpo", parents=[common],
                                     description="VaR-constrained trust-region policy optimization")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train from a config file")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--out", type=Path, help="override train.output_dir")

    p = sub.add_parser("eval", parents=[common], help="evaluate a saved checkpoint")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--episodes", required=True, type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--greedy", action="store_true", help="take the most likely action")

    p = sub.add_parser("plot", parents=[common], help="SVG learning curves from metrics CSVs")
    p.add_argument("--inputs", required=True, help="comma-separated metrics CSV paths")
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("selftest", parents=[common], help="run the numerical identity suites")
    p.add_argument("--scale", type=float, default=0.3, help=argparse.SUPPRESS)
    p.add_argument("--beta-shift", type=float, default=0.0, help=argparse.SUPPRESS)
    return parser


def run_train(args) -> int:
    from .trainer import TrainingAborted, train

    if not args.config.is_file():
        print(f"error: config file not found: {args.config}", file=sys.stderr)
        return 2
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(f"error: invalid config {args.config}:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  {problem}", file=sys.stderr)
        return 2
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.output_dir = str(args.out)
    try:
        final = train(config, quiet=args.quiet)
    except TrainingAborted as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return 1
    print(f"metrics {Path(config.output_dir) / 'metrics.csv'}")
    print(f"checkpoint {final}")
    return 0


def run_eval(args) -> int:
    from .trainer import evaluate

    if not (args.checkpoint / "policy.txt").is_file():
        print(f"error: no checkpoint at {args.checkpoint}", file=sys.stderr)
        return 2
    try:
        summary = evaluate(args.checkpoint, args.episodes, seed=args.seed, greedy=args.greedy)
    except (ValueError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print("\n".join(summary.lines()))
    return 0


def run_plot(args) -> int:
    from .plots import PlotInputError, plot_runs

    paths = [Path(p) for p in args.inputs.split(",") if p.strip()]
    missing = [str(p) for p in paths if not p.is_file()]
    if not paths or missing:
        print(f"error: metrics file(s) not found: {', '.join(missing) or args.inputs}", file=sys.stderr)
        return 2
    try:
        written = plot_runs(paths, args.out)
    except PlotInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for path in written:
        print(path)
    return 0


def run_selftest(args) -> int:
    from .selftest import run_selftest as suites

    results = suites(scale=args.scale, beta_shift=args.beta_shift)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {"train": run_train, "eval": run_eval, "plot": run_plot, "selftest": run_selftest}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not hasattr(args, "quiet"):
        args.quiet = False
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
