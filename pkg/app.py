"""
Main command-line entry point for the SAMI toolkit.

This module provides an application-factory style create_app() that builds the
argument parser. Subcommands are organized in separate modules in the
commands package.
"""

import argparse
import logging
import os
import sys
from typing import List, Optional

from config import ConfigError, RunConfig, config_hash, load_config
from commands import register_commands
from storage import JOURNAL, append_journal

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def create_app() -> argparse.ArgumentParser:
    """
    Application factory function to create and configure the argument parser.

    Returns:
        argparse.ArgumentParser: parser with every subcommand registered
    """
    parser = argparse.ArgumentParser(prog="sami", description="Score-guided diffusion autoencoder toolkit")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("--quiet", action="store_true", help="warnings only")
    subparsers = parser.add_subparsers(dest="command", metavar="command")
    subparsers.required = True

    # Register all subcommand groups
    register_commands(subparsers)

    return parser


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


def run(argv: Optional[List[str]] = None) -> int:
    """
    Parse argv, run the selected command and journal it.

    Returns:
        0 on success, 1 when the command fails, 2 on a usage error
    """
    parser = create_app()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    configure_logging(args.verbose, args.quiet)

    try:
        config = load_config(args.config) if args.config else RunConfig()
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    success, message, outputs = args.handler(args, config)
    journal = os.path.join(os.path.dirname(os.path.abspath(args.out)), JOURNAL)
    append_journal(journal, args.command, config_hash(config), args.seed, outputs.values())
    if not success:
        print(message, file=sys.stderr)
        return EXIT_FAILURE
    print(message)
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
