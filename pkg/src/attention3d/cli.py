"""Command-line driver: ``attention3d <subcommand> [--config F] [--out D] [--data D] [--seed N] [--threads N]``."""

from __future__ import annotations

import argparse
import logging
import sys

from threadpoolctl import threadpool_limits

from .errors import Attention3DError, ConfigError
from .pipeline import PIPELINE_ORDER, Context, PipelineConfig, run_pipeline, run_stage

SUBCOMMANDS = PIPELINE_ORDER + ["synth", "pipeline"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage problems are configuration errors, reported on one line
        raise ConfigError(message)


def build_parser():
    parser = _Parser(prog="attention3d", description="3D gaze and ROI analytics from RGB-D scans and eye-tracker data")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage" if name != "pipeline" else "run all stages in order")
        p.add_argument("--config", help="JSON config file (unknown keys are rejected)")
        p.add_argument("--out", required=True, help="output directory (dataset directory for synth)")
        if name != "synth":
            p.add_argument("--data", required=True, help="dataset directory (scan/, etg/, logos/, ...)")
        else:
            p.add_argument("--scene", help="scene spec JSON (default: bundled demo scene)")
            p.add_argument("--session", help="session spec JSON (default: bundled demo session)")
        p.add_argument("--seed", type=_u64, help="override the config seed")
        p.add_argument("--threads", type=_positive, help="cap BLAS/OpenMP worker threads")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def _u64(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("thread count must be >= 1")
    return v


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    config = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        config = config.with_seed(args.seed)
    ctx = Context(getattr(args, "data", None), args.out, config)
    with threadpool_limits(limits=args.threads):
        if args.command == "pipeline":
            run_pipeline(ctx)
        elif args.command == "synth":
            run_stage("synth", ctx, scene_path=args.scene, session_path=args.session)
        else:
            run_stage(args.command, ctx)
    return 0


def main(argv=None):
    try:
        return run(argv)
    except Attention3DError as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {exc.category}: {msg}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
