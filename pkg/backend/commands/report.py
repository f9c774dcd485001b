# backend/commands/report.py
"""
report: text summary and plot-data CSVs from one or more estimate directories
"""

import argparse
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd

from commands.options import add_common_options
from models.schemas import Manifest
from services import artifacts
from utils.errors import UsageError
from utils.helpers import format_interval, format_probability, format_ratio, sort_rows

logger = logging.getLogger(__name__)

NAME = "report"

SUMMARY_TXT = "summary.txt"
FIG1_CSV = "fig1_strata.csv"
FIG2_CSV = "fig2_bias.csv"
FIG3_CSV = "fig3_subgroups.csv"

FIG2_COLUMNS = [
    "label", "rr", "rr_low", "rr_high", "rr_percent_bias", "rr_percent_bias_low", "rr_percent_bias_high",
    "delta_percent_of_max", "delta_percent_of_max_low", "delta_percent_of_max_high",
    "bias_reduction", "bias_reduction_low", "bias_reduction_high", "underestimate",
]


@dataclass(frozen=True)
class EstimateRun:
    name: str
    store: artifacts.ArtifactStore
    manifest: Manifest


def load_runs(estimate_dirs: Sequence[str]) -> List[EstimateRun]:
    """Estimate directories whose manifests agree on config hash and seed"""
    if not estimate_dirs:
        raise UsageError("report needs at least one estimates directory")
    runs: List[EstimateRun] = []
    names = set()
    for directory in estimate_dirs:
        store = artifacts.ArtifactStore(directory)
        store.require([artifacts.MANIFEST_JSON, artifacts.ESTIMATES_JSON])
        name = Path(directory).name or str(directory)
        while name in names:
            name = f"{name}_{len(names)}"
        names.add(name)
        runs.append(EstimateRun(name=name, store=store, manifest=store.read_manifest()))
    first = runs[0].manifest
    for run in runs[1:]:
        if run.manifest.config_hash != first.config_hash or run.manifest.seed != first.seed:
            raise UsageError(
                f"refusing to merge mismatched manifests: {runs[0].name} "
                f"(hash {first.config_hash[:12]}, seed {first.seed}) vs {run.name} "
                f"(hash {run.manifest.config_hash[:12]}, seed {run.manifest.seed})"
            )
    return runs


def _estimate_lines(payload: Dict[str, Any], bias: Optional[Dict[str, Any]]) -> List[str]:
    rows = []
    bias_by_label = {row["label"]: row for row in (bias or {}).get("rows", [])}
    for entry in payload["estimates"]:
        label = entry["label"]
        bias_row = bias_by_label.get(label, {})
        rr_ci = entry.get("ci", {}).get("rr", {})
        rows.append({
            "label": label,
            "p0": entry["p0"],
            "rr": entry["rr"],
            "rr_ci": format_interval(rr_ci.get("low"), rr_ci.get("high")),
            "delta": entry["delta"],
            "rr_percent_bias": bias_row.get("rr_percent_bias"),
            "bias_reduction": bias_row.get("bias_reduction"),
        })
    if bias_by_label:
        rows = sort_rows(rows, "rr_percent_bias")
    lines = [
        f"{'label':<12} {'p0':>10} {'RR':>8} {'RR CI':>20} {'delta':>11} {'RR bias %':>10} {'bias red. %':>12}"
    ]
    for row in rows:
        lines.append(
            f"{row['label']:<12} {format_probability(row['p0']):>10} {format_ratio(row['rr']):>8} "
            f"{row['rr_ci']:>20} {format_probability(row['delta']):>11} "
            f"{format_ratio(row['rr_percent_bias']):>10} {format_ratio(row['bias_reduction']):>12}"
        )
    return lines


def render_summary(run: EstimateRun) -> str:
    payload = run.store.read_json(artifacts.ESTIMATES_JSON)
    bias = run.store.read_json(artifacts.BIAS_JSON) if run.store.has(artifacts.BIAS_JSON) else None
    boot = payload.get("bootstrap", {})
    lines = [
        f"Peer-effect estimates: {run.name}",
        f"config hash: {run.manifest.config_hash}",
        f"bootstrap seed: {run.manifest.seed}",
        f"replicates: {boot.get('replicates')} kept, {boot.get('dropped')} dropped "
        f"({boot.get('scheme')} weights, {boot.get('interval')} intervals)",
    ]
    truth = payload.get("ground_truth")
    if truth:
        lines.append(
            f"ground truth: p0={format_probability(truth['true_p0_exposed'])} "
            f"p1={format_probability(truth['true_p1_exposed'])} RR={format_ratio(truth['true_rr'])} "
            f"delta={format_probability(truth['true_delta'])}"
        )
    lines.append("")
    lines.extend(_estimate_lines(payload, bias))
    flags = list(payload.get("flags", []))
    for entry in payload["estimates"]:
        flags.extend(f"{entry['label']}: {flag}" for flag in entry.get("flags", []))
    if bias:
        flags.extend(f"bias report: {flag}" for flag in bias.get("flags", []))
    if flags:
        lines.append("")
        lines.append("flags:")
        lines.extend(f"  - {flag}" for flag in flags)
    return "\n".join(lines) + "\n"


def _merged_frame(runs: Sequence[EstimateRun], name: str, columns: Optional[List[str]] = None) -> Optional[pd.DataFrame]:
    frames = []
    for run in runs:
        if not run.store.has(name):
            continue
        frame = run.store.read_csv(name)
        if columns is not None:
            frame = frame.reindex(columns=columns)
        frame.insert(0, "run", run.name)
        frames.append(frame)
    if not frames:
        return None
    return pd.concat(frames, ignore_index=True)


def cmd_report(estimate_dirs: Sequence[str], output_dir: Optional[str] = None) -> Dict[str, Any]:
    """Render summary.txt and the fig*_*.csv plot data; no plotting"""
    runs = load_runs(estimate_dirs)
    store = artifacts.ArtifactStore(output_dir or str(Path(estimate_dirs[0]) / "report"))
    store.write_text(SUMMARY_TXT, "\n".join(render_summary(run) for run in runs))
    for name, source, columns in (
        (FIG1_CSV, artifacts.STRATA_CSV, None),
        (FIG2_CSV, artifacts.BIAS_CSV, FIG2_COLUMNS),
        (FIG3_CSV, artifacts.SUBGROUPS_CSV, None),
    ):
        frame = _merged_frame(runs, source, columns)
        if frame is None:
            logger.info(f"No {source} in the estimate directories; skipping {name}")
            continue
        store.write_frame(name, frame)
    logger.info(f"Report written to {store.root}")
    return {"output_dir": str(store.root), "runs": [run.name for run in runs], "artifacts": list(store.written)}


def run(args: argparse.Namespace) -> Dict[str, Any]:
    return cmd_report(args.estimates, args.output)


def register(subparsers) -> None:
    parser = subparsers.add_parser(NAME, help="summarize estimate directories into text and plot-data CSVs")
    parser.add_argument("estimates", nargs="+", help="estimate directories (manifests must match)")
    parser.add_argument("--output", default=None, help="report directory (default <first>/report)")
    add_common_options(parser)
    parser.set_defaults(handler=run)
