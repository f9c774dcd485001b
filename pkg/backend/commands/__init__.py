# backend/commands/__init__.py
from . import estimate, ingest_check, report, run_all, simulate

# Subcommands in help order
COMMANDS = [simulate, ingest_check, estimate, report, run_all]


def register_commands(subparsers) -> None:
    """Include every subcommand module in the CLI"""
    for command in COMMANDS:
        command.register(subparsers)


__all__ = ["COMMANDS", "register_commands"]
