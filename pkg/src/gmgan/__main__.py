"""Command-line entry point: ``gmgan <experiment> [--config PATH] [--seed N] [--out DIR] [key=value ...]``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .errors import GmganError


def build_parser():
    parser = argparse.ArgumentParser(prog="gmgan", description="Gaussian-mixture GAN experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in harness.EXPERIMENTS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("overrides", nargs="*", metavar="key=value", help="per-key overrides")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = harness.parse_config(args.config, args.overrides, experiment=args.experiment,
                                   seed=args.seed, out=args.out)
        harness.run(cfg)
    except harness.ConfigError as exc:
        print(f"error: ConfigError: {exc}", file=sys.stderr)
        return 2
    except (GmganError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
