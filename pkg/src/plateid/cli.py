"""Command-line entry point: ``plateid <stage> [--config FILE] [flags]``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical
failure, 4 segmentation failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import PipelineConfig, load_config
from .errors import (
    ConfigurationError,
    FormatError,
    InvalidArgumentError,
    NonPhysicalDeformationError,
    NumericalFailureError,
    RootBracketError,
    SegmentationError,
    SingularSystemError,
)

__all__ = ["main", "build_parser"]

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_SEGMENTATION = 0, 2, 3, 4

STAGES = {
    "generate": pipeline.cmd_generate,
    "segment": pipeline.cmd_segment,
    "identify": pipeline.cmd_identify,
    "validate": pipeline.cmd_validate,
    "run-all": pipeline.run_all,
}

# command-line flag -> PipelineConfig attribute
_OVERRIDES = {
    "out": "out",
    "seed": "seed",
    "lambda_flag": "lambda_flag",
    "frac_free": "frac_free",
    "frac_flag": "frac_flag",
    "chains": "chains",
    "chain_length": "chain_length",
    "burn_in": "burn_in",
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="plateid",
        description="Segment a heterogeneous hyperelastic plate and identify one sparse model per region.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", help="key = value configuration file (defaults: cross scenario)")
        p.add_argument("--out", help="run directory")
        p.add_argument("--seed", type=int, help="global seed")
        p.add_argument("--lambda-flag", type=float, help="flagging threshold in units of sigma(f_res)")
        p.add_argument("--frac-free", type=float, help="fraction of unflagged free nodes kept")
        p.add_argument("--frac-flag", type=float, help="fraction of flagged nodes kept per interface group")
        p.add_argument("--chains", type=int, help="number of Gibbs chains")
        p.add_argument("--chain-length", type=int, help="sweeps per chain including burn-in")
        p.add_argument("--burn-in", type=int, help="discarded sweeps per chain")
    return parser


def resolve_config(args):
    cfg = load_config(args.config) if args.config else PipelineConfig()
    kw = {attr: getattr(args, flag) for flag, attr in _OVERRIDES.items()}
    cfg = cfg.with_overrides(**kw)
    cfg.validate()
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        STAGES[args.command](cfg)
    except (ConfigurationError, FormatError, InvalidArgumentError) as exc:
        print(f"plateid: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SegmentationError as exc:
        print(f"plateid: segmentation failed: {exc}", file=sys.stderr)
        return EXIT_SEGMENTATION
    except (NumericalFailureError, SingularSystemError, NonPhysicalDeformationError, RootBracketError) as exc:
        print(f"plateid: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
