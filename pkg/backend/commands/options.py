# backend/commands/options.py
"""
Flags shared by the estimate and run-all subcommands
"""

import argparse
from typing import Any, Dict, List, Optional

from config.settings import load_run_config, settings
from models.schemas import RunConfig


def comma_list(value: str) -> List[str]:
    return [part.strip() for part in value.split(",") if part.strip()]


def comma_floats(value: str) -> List[float]:
    try:
        return [float(part) for part in comma_list(value)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{value}'")


def add_common_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--threads", type=int, default=None,
                        help=f"worker count (default {settings.THREADS}); results do not depend on it")
    parser.add_argument("--log-level", default=None, help=f"logging level (default {settings.LOG_LEVEL})")


def add_run_options(parser: argparse.ArgumentParser, with_input: bool = True) -> None:
    parser.add_argument("--config", default=None, help="run config TOML; its keys override flags")
    if with_input:
        parser.add_argument("--input", default=None, help="observation file")
        parser.add_argument("--format", choices=["ndjson", "csv"], default=None, help="input format (default ndjson)")
        parser.add_argument("--schema", dest="schema_path", default=None, help="column mapping TOML")
    parser.add_argument("--specs", type=comma_list, default=None,
                        help="comma-separated spec names (default naive,D,A,Ds,As,M,Ms,AM,AMs)")
    parser.add_argument("--penalty", type=float, default=None, help="L2 penalty (default 0.5)")
    parser.add_argument("--penalty-scale", choices=["total", "per_observation"], default=None)
    parser.add_argument("--no-standardize", dest="standardize", action="store_const", const=False, default=None)
    parser.add_argument("--missing-indicators", action="store_const", const=True, default=None)
    parser.add_argument("--lambda-sweep", type=comma_floats, default=None, help="e.g. 0.1,0.5,5,50")
    parser.add_argument("--strata-c", type=float, default=None, help="J = round(c * sqrt(n1)), default c=1")
    parser.add_argument("--fixed-j", type=int, default=None, help="fixed number of strata per domain")
    parser.add_argument("--strata-pool", choices=["both", "exposed"], default=None)
    parser.add_argument("--replicates", type=int, default=None, help="bootstrap replicates (default 500)")
    parser.add_argument("--scheme", choices=["multinomial", "poisson", "iid", "unit"], default=None)
    parser.add_argument("--no-refit", dest="refit_propensity", action="store_const", const=False, default=None,
                        help="reuse point-estimate scores in replicates (anti-conservative)")
    parser.add_argument("--interval", choices=["normal", "percentile"], default=None)
    parser.add_argument("--variance", choices=["twoway", "product"], default=None,
                        help="twoway combines user, item and row replicates; product uses product weights only")
    parser.add_argument("--seed", type=int, default=None, help="bootstrap seed")
    parser.add_argument("--dump-replicates", action="store_const", const=True, default=None)
    parser.add_argument("--subgroup-k", type=int, default=None, help="popularity buckets (default 5)")
    parser.add_argument("--no-subgroups", dest="subgroups", action="store_const", const=False, default=None)
    parser.add_argument("--diagnostics-spec", default=None, help="spec whose strata are exported")
    parser.add_argument("--grand-naive", action="store_const", const=True, default=None)
    parser.add_argument("--save-fits", action="store_const", const=True, default=None)
    parser.add_argument("--output-dir", default=None, help=f"artifact directory (default {settings.OUTPUT_DIR})")
    add_common_options(parser)


def _present(values: Dict[str, Any]) -> Dict[str, Any]:
    return {key: value for key, value in values.items() if value is not None}


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    """Flag values as a RunConfig dict; unset flags are left out"""
    def get(name: str) -> Any:
        return getattr(args, name, None)

    overrides = _present({
        "input": get("input"),
        "format": get("format"),
        "schema_path": get("schema_path"),
        "specs": get("specs"),
        "penalty": get("penalty"),
        "penalty_scale": get("penalty_scale"),
        "standardize": get("standardize"),
        "missing_indicators": get("missing_indicators"),
        "lambda_sweep": get("lambda_sweep"),
        "subgroup_k": get("subgroup_k"),
        "subgroups": get("subgroups"),
        "diagnostics_spec": get("diagnostics_spec"),
        "grand_naive": get("grand_naive"),
        "save_fits": get("save_fits"),
        "output_dir": get("output_dir") or settings.OUTPUT_DIR,
        "threads": get("threads") or settings.THREADS,
        "log_level": get("log_level") or settings.LOG_LEVEL,
    })
    strata = _present({"c": get("strata_c"), "fixed_j": get("fixed_j"), "pool": get("strata_pool")})
    if strata:
        overrides["strata"] = strata
    bootstrap = _present({
        "replicates": get("replicates"),
        "scheme": get("scheme"),
        "refit_propensity": get("refit_propensity"),
        "interval": get("interval"),
        "variance": get("variance"),
        "seed": get("seed"),
        "dump_replicates": get("dump_replicates"),
    })
    if bootstrap:
        overrides["bootstrap"] = bootstrap
    return overrides


def run_config_from_args(args: argparse.Namespace, extra: Optional[Dict[str, Any]] = None) -> RunConfig:
    overrides = overrides_from_args(args)
    overrides.update(extra or {})
    return load_run_config(getattr(args, "config", None), overrides)
