"""Command-line front end.

One subcommand per pipeline stage; global flags select the config file,
override the seed, redirect outputs, or silence progress logging. Exit
codes: 0 success, 2 missing prerequisite stage, 3 configuration problem,
1 anything else.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .errors import ConfigError, PrerequisiteError, TraceSeqError
from .pipeline import STAGES, run_stage

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_MISSING_PREREQUISITE = 2
EXIT_BAD_CONFIG = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trace-seq",
        description=(
            "Sequential EHR onset-prediction pipeline: synthetic cohorts, "
            "two-stage pre-training, joint-attention training, and evaluation."
        ),
    )
    parser.add_argument("--config", metavar="PATH", help="TOML experiment config")
    parser.add_argument("--seed", type=int, metavar="N", help="override the config seed")
    parser.add_argument("--out", metavar="DIR", help="override the output directory")
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")
    sub = parser.add_subparsers(dest="stage", metavar="stage")
    descriptions = {
        "gen-cohort": "generate, match, and split the synthetic cohort",
        "pretrain-codes": "pre-train the medical-code embedding table",
        "pretrain-autoencoder": "pre-train the visit-sequence autoencoder",
        "train": "train the configured variant end to end",
        "evaluate": "score the test split and render the PR curve",
        "export-attention": "export back-projected attention for a high-scoring case",
        "export-embeddings": "export test-split patient embeddings",
    }
    for stage in STAGES:
        sub.add_parser(stage, help=descriptions[stage])
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(message)s",
        stream=sys.stderr,
    )
    if not args.stage:
        build_parser().print_help()
        return EXIT_BAD_CONFIG
    try:
        cfg = load_config(args.config, seed=args.seed, out_dir=args.out)
    except FileNotFoundError as exc:
        print(f"error: config file not found: {exc.filename}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    try:
        run_stage(args.stage, cfg)
    except PrerequisiteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_PREREQUISITE
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except TraceSeqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
