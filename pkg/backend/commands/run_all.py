# backend/commands/run_all.py
import argparse
import logging
from pathlib import Path
from typing import Any, Dict, Optional

from commands.estimate import cmd_estimate
from commands.options import add_run_options, run_config_from_args
from commands.report import cmd_report
from config.settings import load_sim_config
from models.schemas import RunConfig, SimConfig
from services.simulator import simulator
from utils.errors import UsageError

logger = logging.getLogger(__name__)

NAME = "run-all"

DATA_FILE = "data/simulated.ndjson"
ESTIMATES_DIR = "estimates"
REPORT_DIR = "report"


def cmd_run_all(run_config: RunConfig) -> Dict[str, Any]:
    """
    simulate -> estimate -> report under one output directory

    Estimation uses the in-memory simulation, so the config hash carries the
    simulation settings rather than a file path.
    """
    if run_config.simulation is None:
        raise UsageError("run-all needs a simulation config (--sim-config or a [simulation] table)")
    root = Path(run_config.output_dir)
    dataset = simulator.generate(run_config.simulation, run_config.threads)
    written = simulator.emit(dataset, str(root / DATA_FILE))
    estimate_config = run_config.model_copy(update={"output_dir": str(root / ESTIMATES_DIR)})
    estimate_summary = cmd_estimate(estimate_config, dataset)
    report_summary = cmd_report([str(root / ESTIMATES_DIR)], str(root / REPORT_DIR))
    return {
        "data": [str(path) for path in written],
        "estimates": estimate_summary,
        "report": report_summary,
    }


def run(args: argparse.Namespace) -> Dict[str, Any]:
    simulation: Optional[SimConfig] = None
    if args.sim_config:
        simulation = load_sim_config(args.sim_config)
    elif args.config is None:
        simulation = SimConfig()
    extra = {"simulation": simulation.model_dump()} if simulation is not None else {}
    return cmd_run_all(run_config_from_args(args, extra))


def register(subparsers) -> None:
    parser = subparsers.add_parser(NAME, help="simulate, estimate and report in one go")
    parser.add_argument("--sim-config", default=None, help="simulation TOML (default settings when omitted)")
    add_run_options(parser, with_input=False)
    parser.set_defaults(handler=run)
