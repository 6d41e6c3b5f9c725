"""``ovcgp`` command line entry point."""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from ..errors import NumericalError, StateError
from .config import ConfigError, dump_config, load_config

COMMANDS = {
    "stream-regress": "stream",
    "bo-run": "bo",
    "active-learn": "active",
    "lts-demo": "lts",
    "classify-stream": "classify",
    "export-state": "export",
}

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def build_parser():
    parser = argparse.ArgumentParser(prog="ovcgp",
                                     description="Streaming sparse GP experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--seed", type=int, help="first seed")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
        sp.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    kind = COMMANDS[args.command]
    try:
        cfg = load_config(args.config, args.override, kind=kind, seed=args.seed, out=args.out)
    except (ConfigError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    from .experiments import run  # deferred so config errors report fast

    try:
        records = run(cfg)
    except (NumericalError, StateError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, OSError) as exc:
        # bad config values and malformed input data
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.verbose:
        print(dump_config(cfg), file=sys.stderr)
    last = records[-1] if records else None
    print(f"{args.command}: {len(records)} records written to {cfg.out}"
          + (f"; last metric {last.metric}" if last is not None else ""))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
