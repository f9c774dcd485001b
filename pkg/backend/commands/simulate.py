# backend/commands/simulate.py
import argparse
import logging
from pathlib import Path
from typing import Any, Dict, Optional

from commands.options import add_common_options
from config.settings import load_sim_config, settings
from models.schemas import SimConfig
from services.simulator import simulator

logger = logging.getLogger(__name__)

NAME = "simulate"


def cmd_simulate(
    config_path: Optional[str] = None,
    output: Optional[str] = None,
    format: str = "ndjson",
    seed: Optional[int] = None,
    threads: int = 1,
) -> Dict[str, Any]:
    """Generate a synthetic dataset and write it with its ground-truth sidecar"""
    config = load_sim_config(config_path) if config_path else SimConfig()
    if seed is not None:
        config = config.model_copy(update={"seed": seed})
    extension = "ndjson" if format == "ndjson" else "csv"
    target = output or str(Path(settings.OUTPUT_DIR) / f"simulated.{extension}")
    dataset = simulator.generate(config, threads)
    written = simulator.emit(dataset, target, format)
    truth = dataset.ground_truth
    return {
        "files": [str(path) for path in written],
        "observations": len(dataset),
        "users": dataset.n_users,
        "domains": len(dataset.domain_ids),
        "true_rr": truth.true_rr,
        "true_delta": truth.true_delta,
    }


def run(args: argparse.Namespace) -> Dict[str, Any]:
    return cmd_simulate(args.config, args.output, args.format, args.seed, args.threads or settings.THREADS)


def register(subparsers) -> None:
    parser = subparsers.add_parser(NAME, help="generate a synthetic confounded dataset")
    parser.add_argument("--config", default=None, help="simulation TOML (default settings when omitted)")
    parser.add_argument("--output", default=None, help="data file to write")
    parser.add_argument("--format", choices=["ndjson", "csv"], default="ndjson")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    add_common_options(parser)
    parser.set_defaults(handler=run)
