# backend/commands/estimate.py
"""
estimate: every requested estimator with bootstrap intervals, bias metrics and diagnostics
"""

import argparse
import logging
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from commands.options import add_run_options, run_config_from_args
from config.settings import load_schema
from models.schemas import BiasReport, EffectEstimate, Interval, ModelSpec, RunConfig, SubgroupEstimate
from services import artifacts
from services.bias_metrics import build_bias_report
from services.bootstrap import BootstrapResult, bootstrap_ci, evaluation_pipeline, evaluation_quantities
from services.dataset import Dataset, ingest
from services.estimators import (
    EXPERIMENTAL_LABEL,
    Evaluation,
    evaluate_specs,
    penalty_sweep,
    popularity_buckets,
    subgroup_estimates,
)
from services.simulator import simulator
from utils.errors import MetricInputError, UsageError

logger = logging.getLogger(__name__)

NAME = "estimate"

ESTIMATE_COLUMNS = [
    "label", "p0", "p0_low", "p0_high", "p1", "rr", "rr_low", "rr_high",
    "delta", "delta_low", "delta_high", "flags",
]
BIAS_COLUMNS = [
    "label", "rr", "rr_low", "rr_high", "rr_abs_diff", "rr_percent_bias", "rr_percent_bias_low",
    "rr_percent_bias_high", "delta", "delta_abs_diff", "delta_percent_of_max", "delta_percent_of_max_low",
    "delta_percent_of_max_high", "bias_reduction", "bias_reduction_low", "bias_reduction_high", "underestimate",
]
DOMAIN_COLUMNS = ["label", "domain_id", "n_exposed", "p0", "weight", "n_strata", "flags"]
STRATA_COLUMNS = [
    "spec", "domain_id", "stratum", "score_low", "score_high", "n_exposed", "n_necg",
    "p0", "exposed_share", "exposed_rate", "merged_into",
]
SUBGROUP_COLUMNS = [
    "bucket", "popularity_low", "popularity_high", "n_domains", "label", "p0", "p1",
    "rr", "rr_low", "rr_high", "delta", "delta_low", "delta_high", "flags",
]
SWEEP_COLUMNS = ["spec", "penalty", "p0", "p1", "rr", "delta", "flagged_domains"]


def load_dataset(run_config: RunConfig) -> Dataset:
    if run_config.simulation is not None:
        return simulator.generate(run_config.simulation, run_config.threads)
    return ingest(run_config.input, run_config.format, load_schema(run_config.schema_path))


def _diagnostics_spec(run_config: RunConfig, specs: Sequence[ModelSpec]) -> Optional[str]:
    names = [spec.name for spec in specs if not spec.is_naive]
    if run_config.diagnostics_spec is not None:
        if run_config.diagnostics_spec not in names:
            raise UsageError(f"diagnostics spec '{run_config.diagnostics_spec}' is not among the adjusted specs")
        return run_config.diagnostics_spec
    return names[-1] if names else None


def _bounds(intervals: Mapping[str, Interval], key: str) -> Tuple[Optional[float], Optional[float]]:
    interval = intervals.get(key)
    if interval is None:
        return None, None
    return interval.low, interval.high


def _estimate_rows(estimates: Mapping[str, EffectEstimate], intervals: Mapping[str, Interval]) -> List[Dict[str, Any]]:
    rows = []
    for label, estimate in estimates.items():
        row = {"label": label, "p0": estimate.p0, "p1": estimate.p1, "rr": estimate.rr, "delta": estimate.delta,
               "flags": ";".join(estimate.flags)}
        for quantity in ("p0", "rr", "delta"):
            row[f"{quantity}_low"], row[f"{quantity}_high"] = _bounds(intervals, f"{label}.{quantity}")
        rows.append(row)
    return rows


def _domain_rows(estimates: Mapping[str, EffectEstimate]) -> List[Dict[str, Any]]:
    rows = []
    for label, estimate in estimates.items():
        for entry in estimate.domains:
            rows.append({
                "label": label,
                "domain_id": entry.domain_id,
                "n_exposed": entry.n_exposed,
                "p0": entry.p0,
                "weight": entry.weight,
                "n_strata": entry.n_strata,
                "flags": ";".join(entry.flags),
            })
    return rows


def _bias_rows(report: BiasReport) -> List[Dict[str, Any]]:
    rows = []
    for entry in report.rows:
        row = entry.model_dump(exclude={"ci"})
        for metric in ("rr", "rr_percent_bias", "delta_percent_of_max", "bias_reduction"):
            interval = entry.ci.get(metric)
            row[f"{metric}_low"] = interval.low if interval else None
            row[f"{metric}_high"] = interval.high if interval else None
        rows.append(row)
    return rows


def _subgroup_rows(subgroups: Sequence[SubgroupEstimate], intervals: Mapping[str, Interval]) -> List[Dict[str, Any]]:
    rows = []
    for subgroup in subgroups:
        base = {
            "bucket": subgroup.bucket,
            "popularity_low": subgroup.popularity_low,
            "popularity_high": subgroup.popularity_high,
            "n_domains": subgroup.n_domains,
        }
        for estimate in subgroup.estimates:
            prefix = f"subgroup{subgroup.bucket}.{estimate.label}"
            row = {**base, "label": estimate.label, "p0": estimate.p0, "p1": estimate.p1, "rr": estimate.rr,
                   "delta": estimate.delta, "flags": ";".join(subgroup.flags + estimate.flags)}
            row["rr_low"], row["rr_high"] = _bounds(intervals, f"{prefix}.rr")
            row["delta_low"], row["delta_high"] = _bounds(intervals, f"{prefix}.delta")
            rows.append(row)
    return rows


def _write_artifacts(
    store: artifacts.ArtifactStore,
    run_config: RunConfig,
    dataset: Dataset,
    evaluation: Evaluation,
    boot: BootstrapResult,
    report: Optional[BiasReport],
    subgroups: Sequence[SubgroupEstimate],
    sweep: Sequence[Dict[str, Any]],
    diagnostics: Optional[str],
    flags: List[str],
) -> None:
    intervals = boot.intervals
    estimates = evaluation.estimates
    store.write_json(artifacts.ESTIMATES_JSON, {
        "estimates": [
            {
                **estimate.model_dump(mode="json"),
                "ci": {
                    quantity: intervals[f"{label}.{quantity}"].model_dump(mode="json")
                    for quantity in ("p0", "rr", "delta")
                    if f"{label}.{quantity}" in intervals
                },
            }
            for label, estimate in estimates.items()
        ],
        "ground_truth": None if dataset.ground_truth is None else dataset.ground_truth.model_dump(mode="json"),
        "bootstrap": {
            "replicates": boot.n_replicates,
            "dropped": boot.n_dropped,
            "scheme": run_config.bootstrap.scheme,
            "interval": run_config.bootstrap.interval,
            "variance": run_config.bootstrap.variance,
            "refit_propensity": run_config.bootstrap.refit_propensity,
        },
        "flags": flags,
    })
    store.write_csv(artifacts.ESTIMATES_CSV, _estimate_rows(estimates, intervals), ESTIMATE_COLUMNS)
    store.write_csv(artifacts.DOMAINS_CSV, _domain_rows(estimates), DOMAIN_COLUMNS)
    if report is not None:
        store.write_json(artifacts.BIAS_JSON, report)
        store.write_csv(artifacts.BIAS_CSV, _bias_rows(report), BIAS_COLUMNS)
    if diagnostics is not None:
        store.write_csv(artifacts.STRATA_CSV, evaluation.adjusted[diagnostics].strata_rows, STRATA_COLUMNS)
    if subgroups:
        store.write_json(artifacts.SUBGROUPS_JSON, [subgroup.model_dump(mode="json") for subgroup in subgroups])
        store.write_csv(artifacts.SUBGROUPS_CSV, _subgroup_rows(subgroups, intervals), SUBGROUP_COLUMNS)
    if sweep:
        store.write_csv(artifacts.SWEEP_CSV, sweep, SWEEP_COLUMNS)
    if boot.replicates:
        fixed = ["replicate", "family", "dropped"]
        columns = fixed + sorted(key for key in boot.replicates[0] if key not in fixed)
        store.write_csv(artifacts.REPLICATES_CSV, boot.replicates, columns)
    if run_config.save_fits:
        for name, run in evaluation.adjusted.items():
            store.write_json(artifacts.fit_artifact_name(name, run_config.penalty), {
                "spec": name,
                "penalty": run_config.penalty,
                "penalty_scale": run_config.penalty_scale,
                "fits": {domain_id: fit.model_dump(mode="json") for domain_id, fit in run.fits.items()},
            })


def cmd_estimate(run_config: RunConfig, dataset: Optional[Dataset] = None) -> Dict[str, Any]:
    """
    Run every estimator and write the estimate artifacts

    Args:
        run_config: validated run configuration
        dataset: already-loaded observations; loaded from the config when omitted

    Returns:
        summary dict (output directory, config hash, pooled estimates, flags)
    """
    dataset = dataset if dataset is not None else load_dataset(run_config)
    specs = run_config.model_specs()
    threads = run_config.threads
    diagnostics = _diagnostics_spec(run_config, specs)
    flags: List[str] = []

    evaluation = evaluate_specs(
        dataset,
        specs,
        threads=threads,
        grand_naive=run_config.grand_naive,
        collect_strata=[diagnostics] if diagnostics else [],
    )
    for label, estimate in evaluation.estimates.items():
        logger.info(f"{label}: p0={estimate.p0:.4e} p1={estimate.p1:.4e} rr={estimate.rr} flags={len(estimate.flags)}")

    buckets = None
    if run_config.subgroups:
        if dataset.features.has_prior_shares:
            buckets = popularity_buckets(dataset, run_config.subgroup_k)
        else:
            logger.warning("No prior shares by domain; skipping popularity subgroups")
            flags.append("subgroups_skipped:no_prior_shares")

    point = evaluation_quantities(dataset, evaluation, buckets)
    point_fits = {name: run.fits for name, run in evaluation.adjusted.items()}
    pipeline = evaluation_pipeline(dataset, specs, run_config.bootstrap, point_fits, run_config.grand_naive, buckets)
    boot = bootstrap_ci(dataset, pipeline, point, run_config.bootstrap, threads)

    report = None
    if EXPERIMENTAL_LABEL in evaluation.estimates:
        try:
            report = build_bias_report(evaluation.estimates, boot.intervals)
        except MetricInputError as e:
            logger.warning(f"Bias report skipped: {e.detail}")
            flags.append(f"bias_report_skipped:{e.detail}")
    else:
        flags.append("bias_report_skipped:no_experimental_arm")

    subgroups = subgroup_estimates(dataset, evaluation, buckets) if buckets is not None else []
    sweep = penalty_sweep(dataset, specs, run_config.lambda_sweep, threads) if run_config.lambda_sweep else []

    store = artifacts.open_store(run_config.output_dir)
    _write_artifacts(store, run_config, dataset, evaluation, boot, report, subgroups, sweep, diagnostics, flags)
    manifest = store.write_manifest(run_config)
    logger.info(f"Wrote {len(manifest.artifacts)} artifacts to {store.root}")
    return {
        "output_dir": str(store.root),
        "config_hash": manifest.config_hash,
        "estimates": {
            label: {"p0": estimate.p0, "rr": estimate.rr, "delta": estimate.delta}
            for label, estimate in evaluation.estimates.items()
        },
        "bootstrap_dropped": boot.n_dropped,
        "flags": flags,
    }


def run(args: argparse.Namespace) -> Dict[str, Any]:
    return cmd_estimate(run_config_from_args(args))


def register(subparsers) -> None:
    parser = subparsers.add_parser(NAME, help="estimate p0, RR and delta for every spec with bootstrap CIs")
    add_run_options(parser)
    parser.set_defaults(handler=run)
