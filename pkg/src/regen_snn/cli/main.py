"""
regen-snn command line.

Usage:
    regen-snn train-stack   --config configs/mnist_p2.json [--seed N] [--out DIR]
    regen-snn train-readout --config configs/mnist_p2.json [--subset N]
    regen-snn eval          --config configs/mnist_p2.json [--passes 2] [--iterations 5]
    regen-snn reconstruct   --checkpoint out/stack.ckpt --index 0
    regen-snn inspect       --checkpoint out/model.ckpt [--out dumps/]
    regen-snn sweep         --config configs/mnist_desk.json --sizes 500,1000,2000

Exit codes:
    0  success
    1  other library error
    2  config error (bad file, unknown key, missing dataset path, bad flag)
    3  data error (malformed dataset file, empty set, geometry mismatch)
    4  numeric abort (non-finite gradient or loss)
    5  I/O or checkpoint error
    6  untrained model for the requested command
"""
import argparse
import logging
import sys
from typing import Optional, Sequence

from .. import __version__
from ..engine.errors import (
    CheckpointError,
    ConfigError,
    DataFormatError,
    EmptyDatasetError,
    ExportError,
    NumericError,
    RegenError,
    ShapeError,
    TrainingAborted,
    UntrainedLayerError,
)
from . import commands

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_IO = 5
EXIT_UNTRAINED = 6


def exit_code_for(exc: BaseException) -> int:
    """Map a raised error onto the documented exit code."""
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (DataFormatError, EmptyDatasetError, ShapeError)):
        return EXIT_DATA
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (CheckpointError, ExportError, OSError)):
        return EXIT_IO
    if isinstance(exc, UntrainedLayerError):
        return EXIT_UNTRAINED
    return EXIT_ERROR


def _add_common(parser: argparse.ArgumentParser, checkpoint: bool = True):
    parser.add_argument("--config", help="JSON config file")
    if checkpoint:
        parser.add_argument("--checkpoint", help="checkpoint to read (default: under the output directory)")
    parser.add_argument("--seed", type=int, help="root seed (overrides config)")
    parser.add_argument("--out", help="output directory (overrides config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regen-snn",
        description="Layer-wise regenerative training of spiking conv networks.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings only")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-stack", help="train the conv layers with the regenerative rule")
    _add_common(p, checkpoint=False)
    p.add_argument("--resume", help="continue from a partially trained stack checkpoint")
    p.add_argument("--probe", type=int, default=0,
                   help="held-out test items for before/after reconstruction error")
    p.set_defaults(handler=commands.cmd_train_stack)

    p = sub.add_parser("train-readout", help="train the output layer on a labeled subset")
    _add_common(p)
    p.add_argument("--subset", type=int, help="labeled subset size (overrides config)")
    p.set_defaults(handler=commands.cmd_train_readout)

    p = sub.add_parser("eval", help="classification accuracy on the test set")
    _add_common(p)
    p.add_argument("--passes", type=int, help="presentations per test item (default 2)")
    p.add_argument("--iterations", type=int, help="evaluation iterations (default 5)")
    p.add_argument("--workers", type=int, default=1, help="threads classifying test items")
    p.add_argument("--xlsx", action="store_true", help="also write eval_report.xlsx")
    p.set_defaults(handler=commands.cmd_eval)

    p = sub.add_parser("reconstruct", help="write original/input/reconstruction graymaps")
    _add_common(p)
    source = p.add_mutually_exclusive_group()
    source.add_argument("--index", type=int, help="dataset item index (default 0)")
    source.add_argument("--image", help="binary PGM image to reconstruct")
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.set_defaults(handler=commands.cmd_reconstruct)

    p = sub.add_parser("inspect", help="topology, weight statistics, probe sparsity")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="config for the probe dataset (default: checkpoint snapshot)")
    p.add_argument("--probe-index", type=int, default=0)
    p.add_argument("--probe-count", type=int, default=1, help="probe items averaged from --probe-index on")
    p.add_argument("--out", help="directory for kernel and feature-map dumps and inspect_metrics.csv")
    p.set_defaults(handler=commands.cmd_inspect)

    p = sub.add_parser("sweep", help="accuracy versus labeled-subset size")
    _add_common(p)
    p.add_argument("--sizes", required=True, help="comma-separated subset sizes")
    p.add_argument("--passes", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(handler=commands.cmd_sweep)
    return parser


def configure_logging(verbose: bool = False, quiet: bool = False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    try:
        args.handler(args)
    except TrainingAborted as exc:
        logger.error("%s", exc)
        if exc.checkpoint_path is not None:
            print(f"Last finite state saved to {exc.checkpoint_path}", file=sys.stderr)
        return EXIT_NUMERIC
    except (RegenError, OSError) as exc:
        code = exit_code_for(exc)
        logger.error("%s: %s", type(exc).__name__, exc)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
