# backend/commands/ingest_check.py
import argparse
from typing import Any, Dict, Optional

from commands.options import add_common_options
from config.settings import load_schema
from services.dataset import ingest, validate_arms

NAME = "ingest-check"


def cmd_ingest_check(path: str, format: str = "ndjson", schema_path: Optional[str] = None) -> Dict[str, Any]:
    """Validate an observation file and report arm counts"""
    dataset = ingest(path, format, load_schema(schema_path))
    summary = validate_arms(dataset)
    features = dataset.features
    return {
        "observations": len(dataset),
        "users": dataset.n_users,
        "items": dataset.n_items,
        "domains": len(dataset.domain_ids),
        "arm_counts": summary.total.model_dump(),
        "zero_weight_domains": summary.zero_weight_domains,
        "dense_features": list(features.dense.columns),
        "has_prior_shares": features.has_prior_shares,
        "has_same_domain_shares": features.has_same_domain,
        "has_oracle": features.has_oracle,
        "ground_truth": None if dataset.ground_truth is None else dataset.ground_truth.model_dump(),
    }


def run(args: argparse.Namespace) -> Dict[str, Any]:
    return cmd_ingest_check(args.input, args.format, args.schema)


def register(subparsers) -> None:
    parser = subparsers.add_parser(NAME, help="validate an observation file")
    parser.add_argument("--input", required=True, help="observation file")
    parser.add_argument("--format", choices=["ndjson", "csv"], default="ndjson")
    parser.add_argument("--schema", default=None, help="column mapping TOML")
    add_common_options(parser)
    parser.set_defaults(handler=run)
