"""
Main entry point for the PCAg network simulator
Parses the subcommand and flags, runs it and maps failures to exit codes
"""

import argparse
import logging
import sys
from typing import Dict, List, Optional

from .errors import ConfigError
from .runner import SUBCOMMANDS, create_runner

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    """Bad command line"""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="python -m src.main", description="Principal component aggregation simulator")
    parser.add_argument("command", choices=SUBCOMMANDS, help="Pipeline to run")
    parser.add_argument("--config", default="config.yaml", help="Configuration file path")
    parser.add_argument("--range", type=float, dest="radio_range", help="Radio range in meters")
    parser.add_argument("--q", type=int, help="Number of principal components")
    parser.add_argument("--folds", type=int, help="Cross-validation folds")
    parser.add_argument("--seed", type=int, help="Random seed")
    parser.add_argument("--output", help="Output directory")
    parser.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="Override any configuration key (repeatable)")
    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict[str, object]:
    """Flags become dotted configuration keys; --set pairs are applied last"""
    overrides: Dict[str, object] = {}
    if args.radio_range is not None:
        overrides["topology.radio_range"] = args.radio_range
    if args.q is not None:
        overrides["pim.q"] = args.q
        overrides["runtime.q"] = args.q
    if args.folds is not None:
        overrides["experiments.folds"] = args.folds
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.output is not None:
        overrides["output.dir"] = args.output
    for pair in args.set:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got '{pair}'")
        overrides[key.strip()] = value.strip()
    return overrides


def cli_dispatch(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand; returns 0 on success, 1 on usage/validation errors, 2 otherwise"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        overrides = overrides_from_args(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        # --help
        return EXIT_OK if not e.code else EXIT_USAGE

    try:
        runner = create_runner(args.config, overrides)
        runner.run(args.command)
    except ConfigError as e:
        logging.getLogger(__name__).error(f"Invalid configuration: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("\nInterrupted by user", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        logging.getLogger(__name__).error(f"Run failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    """Main CLI entry point"""
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
