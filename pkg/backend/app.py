# backend/app.py
"""
peerstrat - propensity-stratified peer-effect estimation
Command-line application: subcommands, logging setup and exit codes
"""

import argparse
import json
import logging
import sys
from typing import List, Optional

import numpy as np

from commands import register_commands
from config.settings import settings
from utils.errors import NumericalError, PipelineError, UsageError
from utils.helpers import create_error_response

logger = logging.getLogger("peerstrat")

EXIT_OK = 0


class ArgumentParser(argparse.ArgumentParser):
    """argparse that reports bad usage as UsageError instead of exiting with 2"""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog="peerstrat",
        description="Propensity-stratified estimates of peer effects benchmarked against an experiment",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {settings.PACKAGE_VERSION}")
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND")
    subparsers.required = True
    register_commands(subparsers)
    return parser


def configure_logging(level: Optional[str] = None) -> None:
    logging.basicConfig(**settings.get_logging_config(level), force=True)


def main(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand; returns the process exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        configure_logging(getattr(args, "log_level", None))
        payload = args.handler(args)
        print(json.dumps(payload, indent=2, default=str))
        return EXIT_OK
    except PipelineError as e:
        logger.error(f"{type(e).__name__}: {e.detail}")
        print(json.dumps(create_error_response(e)), file=sys.stderr)
        return e.exit_code
    except (FloatingPointError, np.linalg.LinAlgError) as e:
        error = NumericalError(str(e))
        logger.error(f"Numerical failure: {e}")
        print(json.dumps(create_error_response(error)), file=sys.stderr)
        return error.exit_code


if __name__ == "__main__":
    sys.exit(main())
