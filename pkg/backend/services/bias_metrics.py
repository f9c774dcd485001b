# backend/services/bias_metrics.py
"""
Discrepancy between observational estimates and the experimental benchmark
"""

import logging
from typing import Dict, List, Mapping, Optional

from models.schemas import BiasReport, BiasRow, EffectEstimate, Interval
from utils.errors import MetricInputError

logger = logging.getLogger(__name__)

METRICS = ("rr", "rr_abs_diff", "rr_percent_bias", "delta", "delta_abs_diff", "delta_percent_of_max", "bias_reduction")


def rr_percent_bias(rr_m: float, rr_exp: float) -> float:
    """100 * (RR_m - RR_exp) / RR_exp"""
    if rr_exp is None or rr_exp <= 0:
        raise MetricInputError(f"experimental relative risk must be positive, got {rr_exp}")
    return 100.0 * (rr_m - rr_exp) / rr_exp


def delta_percent_of_max_overestimate(delta_m: float, delta_exp: float, p0_exp: float) -> float:
    """
    100 * (delta_m - delta_exp) / p0_exp

    p0_exp is the largest possible overestimate of delta; a negative value means
    the estimator underestimates (see is_underestimate).
    """
    if p0_exp is None or p0_exp <= 0:
        raise MetricInputError(f"experimental p0 must be positive, got {p0_exp}")
    return 100.0 * (delta_m - delta_exp) / p0_exp


def is_underestimate(delta_m: float, delta_exp: float) -> bool:
    return delta_m < delta_exp


def bias_reduction(rr_m: float, rr_naive: float, rr_exp: float) -> float:
    """Percent of the naive estimator's RR bias removed: 100 * (1 - (rr_m - rr_exp) / (rr_naive - rr_exp))"""
    if rr_naive == rr_exp:
        raise MetricInputError("naive estimator has zero bias; bias reduction is undefined")
    return 100.0 * (1.0 - (rr_m - rr_exp) / (rr_naive - rr_exp))


def _bias_row(estimate: EffectEstimate, experimental: EffectEstimate, naive: Optional[EffectEstimate]) -> BiasRow:
    rr_exp = experimental.rr
    rr = estimate.rr
    rr_abs_diff = abs(rr - rr_exp) if rr is not None and rr_exp is not None else None
    percent = rr_percent_bias(rr, rr_exp) if rr is not None and rr_exp is not None else None
    delta_max = None
    if experimental.p0 > 0:
        delta_max = delta_percent_of_max_overestimate(estimate.delta, experimental.delta, experimental.p0)
    reduction = None
    if naive is not None and rr is not None and rr_exp is not None and naive.rr is not None and naive.rr != rr_exp:
        reduction = bias_reduction(rr, naive.rr, rr_exp)
    return BiasRow(
        label=estimate.label,
        rr=rr,
        rr_abs_diff=rr_abs_diff,
        rr_percent_bias=percent,
        delta=estimate.delta,
        delta_abs_diff=abs(estimate.delta - experimental.delta),
        delta_percent_of_max=delta_max,
        underestimate=is_underestimate(estimate.delta, experimental.delta),
        bias_reduction=reduction,
    )


def bias_quantities(estimates: Mapping[str, EffectEstimate], experimental_label: str = "exp",
                    naive_label: str = "naive") -> Dict[str, Optional[float]]:
    """Flat metric values keyed "label.metric", computed within one set of estimates"""
    if experimental_label not in estimates:
        return {}
    experimental = estimates[experimental_label]
    naive = estimates.get(naive_label)
    values: Dict[str, Optional[float]] = {}
    for label, estimate in estimates.items():
        row = _bias_row(estimate, experimental, naive)
        for metric in ("rr_abs_diff", "rr_percent_bias", "delta_abs_diff", "delta_percent_of_max", "bias_reduction"):
            values[f"{label}.{metric}"] = getattr(row, metric)
    return values


def build_bias_report(
    estimates: Mapping[str, EffectEstimate],
    intervals: Optional[Mapping[str, Interval]] = None,
    experimental_label: str = "exp",
    naive_label: str = "naive",
) -> BiasReport:
    """
    Per-estimator bias metrics against the experimental estimate

    Args:
        estimates: EffectEstimates keyed by label, including the experimental one
        intervals: bootstrap intervals keyed "label.metric"
        experimental_label: benchmark label
        naive_label: reference for bias reduction

    Returns:
        BiasReport with one row per estimate, in input order
    """
    if experimental_label not in estimates:
        raise MetricInputError("bias report needs the experimental estimate")
    experimental = estimates[experimental_label]
    if experimental.rr is None or experimental.rr <= 0:
        raise MetricInputError("experimental estimate has no positive relative risk")
    naive = estimates.get(naive_label)
    flags: List[str] = []
    if naive is None:
        flags.append("no_naive_reference")
    elif naive.rr == experimental.rr:
        flags.append("zero_naive_bias")

    rows = []
    for label, estimate in estimates.items():
        row = _bias_row(estimate, experimental, naive)
        if intervals:
            row.ci = {
                metric: intervals[f"{label}.{metric}"]
                for metric in METRICS
                if f"{label}.{metric}" in intervals
            }
        if row.underestimate and label != experimental_label:
            logger.warning(f"{label}: delta below the experimental delta (underestimate)")
        rows.append(row)
    return BiasReport(experimental_label=experimental_label, naive_label=naive_label, rows=rows, flags=flags)
