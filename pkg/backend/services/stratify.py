# backend/services/stratify.py
"""
Propensity-quantile strata and strata-weighted estimates of p0 within a domain
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
from scipy.special import expit

from models.schemas import StrataPolicy
from services.ridge_logit import ScoreVector
from utils.errors import DataError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class StrataAssignment:
    """
    Stratum index per design row (0-based, compacted) with weighted arm counts.

    upper_keys[j] is the right-closed upper bound of stratum j in ranking-key
    space (the linear predictor); the last bound is +inf.
    """
    stratum: np.ndarray
    upper_keys: np.ndarray
    exposed_counts: np.ndarray
    necg_counts: np.ndarray
    n_requested: int

    @property
    def n_strata(self) -> int:
        return len(self.upper_keys)

    @property
    def lower_keys(self) -> np.ndarray:
        return np.concatenate([[-np.inf], self.upper_keys[:-1]])

    def score_bounds(self) -> List[tuple]:
        """(low, high] score interval of each stratum; together they partition [0, 1]"""
        return [(float(expit(low)), float(expit(high))) for low, high in zip(self.lower_keys, self.upper_keys)]


@dataclass(frozen=True, eq=False)
class StrataEstimate:
    """Per-stratum NECG rates and the exposure-weighted domain p0"""
    p0: float
    stratum_p0: np.ndarray
    necg_outcome_sums: np.ndarray
    effective_exposed: np.ndarray
    merged_into: np.ndarray
    flags: List[str] = field(default_factory=list)


def weighted_total(values: np.ndarray) -> float:
    """Sequential sum in array order; every estimator reduces through this or bincount"""
    values = np.asarray(values, dtype=float)
    return float(np.bincount(np.zeros(len(values), dtype=np.int64), weights=values, minlength=1)[0])


def quantile_cuts(keys: np.ndarray, weights: np.ndarray, n_groups: int) -> np.ndarray:
    """
    Weighted ECDF cut points: cut j (1..n_groups-1) is the smallest key whose
    cumulative weight reaches j/n_groups of the total.
    """
    positive = weights > 0
    keys, weights = keys[positive], weights[positive]
    if n_groups <= 1 or len(keys) == 0:
        return np.empty(0)
    unique_keys, inverse = np.unique(keys, return_inverse=True)
    cumulative = np.cumsum(np.bincount(inverse, weights=weights, minlength=len(unique_keys)))
    total = cumulative[-1]
    # cumulative * J >= j * W, compared without dividing
    targets = np.arange(1, n_groups) * total
    positions = np.searchsorted(cumulative * n_groups, targets, side="left")
    return unique_keys[np.minimum(positions, len(unique_keys) - 1)]


def quantile_buckets(values: np.ndarray, n_groups: int, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Right-closed quantile buckets, empty buckets compacted away; returns a 0-based bucket per value"""
    values = np.asarray(values, dtype=float)
    weights = np.ones(len(values)) if weights is None else np.asarray(weights, dtype=float)
    cuts = quantile_cuts(values, weights, n_groups)
    raw = np.searchsorted(cuts, values, side="left")
    _, compacted = np.unique(raw, return_inverse=True)
    return compacted.astype(np.int64)


def assign_strata(
    scores: ScoreVector,
    exposed: np.ndarray,
    policy: StrataPolicy,
    weights: Optional[np.ndarray] = None,
    n_strata: Optional[int] = None,
) -> StrataAssignment:
    """
    Map scores to propensity strata

    Args:
        scores: estimated propensities aligned to design rows
        exposed: 1 for exposed rows, 0 for NECG rows
        policy: strata count rule and quantile pool
        weights: observation weights (bootstrap); defaults to ones
        n_strata: explicit J, overriding the policy's count rule

    Returns:
        StrataAssignment with compacted stratum indices
    """
    keys = np.asarray(scores.linear_predictor, dtype=float)
    exposed = np.asarray(exposed, dtype=float)
    w = np.ones(len(keys)) if weights is None else np.asarray(weights, dtype=float)
    if len(keys) == 0:
        raise DataError("cannot stratify an empty score vector")

    exposed_weight = w * exposed
    requested = n_strata if n_strata is not None else policy.n_strata(weighted_total(exposed_weight))
    pool_weights = exposed_weight if policy.pool == "exposed" else w
    cuts = quantile_cuts(keys, pool_weights, requested)
    raw = np.searchsorted(cuts, keys, side="left")

    occupied = np.bincount(raw, minlength=len(cuts) + 1) > 0
    remap = np.cumsum(occupied) - 1
    stratum = remap[raw].astype(np.int64)
    uppers = np.concatenate([cuts, [np.inf]])[occupied]
    uppers[-1] = np.inf

    count = len(uppers)
    exposed_counts = np.bincount(stratum, weights=exposed_weight, minlength=count)
    necg_counts = np.bincount(stratum, weights=w * (1.0 - exposed), minlength=count)
    if count < requested:
        logger.debug(f"Strata collapsed from {requested} to {count} by tied scores")
    return StrataAssignment(
        stratum=stratum,
        upper_keys=uppers,
        exposed_counts=exposed_counts,
        necg_counts=necg_counts,
        n_requested=requested,
    )


def _merge_targets(exposed_counts: np.ndarray, necg_counts: np.ndarray) -> np.ndarray:
    """Strata with exposed weight but no NECG weight point at the nearest stratum that has NECG rows"""
    targets = np.arange(len(exposed_counts))
    donors = np.flatnonzero(necg_counts > 0)
    for j in np.flatnonzero((exposed_counts > 0) & (necg_counts <= 0)):
        distance = np.abs(donors - j)
        # argmin returns the first minimum, i.e. the lower index on ties
        targets[j] = donors[int(np.argmin(distance))]
    return targets


def strata_p0(
    assignment: StrataAssignment,
    necg_outcomes: np.ndarray,
    exposed: np.ndarray,
    weights: Optional[np.ndarray] = None,
) -> StrataEstimate:
    """
    p0_d = sum_j (n1_dj / n1_d) * p0_dj

    Args:
        assignment: strata for the domain's design rows
        necg_outcomes: outcomes aligned to design rows; entries on exposed rows are ignored
        exposed: 1 for exposed rows, 0 for NECG rows
        weights: observation weights; defaults to ones

    Returns:
        StrataEstimate (raises DataError when no stratum holds NECG rows)
    """
    exposed = np.asarray(exposed, dtype=float)
    w = np.ones(len(exposed)) if weights is None else np.asarray(weights, dtype=float)
    outcomes = np.where(exposed > 0, 0.0, np.asarray(necg_outcomes, dtype=float))
    count = assignment.n_strata
    necg_counts = assignment.necg_counts
    exposed_counts = assignment.exposed_counts
    if not np.any(necg_counts > 0):
        raise DataError("no stratum contains NECG rows")

    sums = np.bincount(assignment.stratum, weights=w * (1.0 - exposed) * outcomes, minlength=count)
    rates = np.full(count, np.nan)
    has_necg = necg_counts > 0
    rates[has_necg] = sums[has_necg] / necg_counts[has_necg]

    targets = _merge_targets(exposed_counts, necg_counts)
    effective = np.zeros(count)
    for j in range(count):
        effective[targets[j]] += exposed_counts[j]

    flags = []
    merged = int(np.sum(targets != np.arange(count)))
    if merged:
        flags.append(f"merged_strata:{merged}")

    total_exposed = weighted_total(exposed_counts)
    p0 = 0.0
    if total_exposed > 0:
        # fixed ascending order so results are reproducible bit for bit
        for j in range(count):
            if effective[j] > 0:
                p0 += (effective[j] / total_exposed) * rates[j]
    return StrataEstimate(
        p0=float(p0),
        stratum_p0=rates,
        necg_outcome_sums=sums,
        effective_exposed=effective,
        merged_into=targets,
        flags=flags,
    )


def strata_table(
    domain_id: str,
    assignment: StrataAssignment,
    estimate: StrataEstimate,
    exposed_outcomes: Optional[np.ndarray] = None,
    exposed: Optional[np.ndarray] = None,
    weights: Optional[np.ndarray] = None,
) -> List[Dict[str, Any]]:
    """Per-stratum diagnostics rows (bounds, counts, NECG rate, exposed share and rate)"""
    exposed_rates = np.full(assignment.n_strata, np.nan)
    if exposed_outcomes is not None and exposed is not None:
        exposed = np.asarray(exposed, dtype=float)
        w = np.ones(len(exposed)) if weights is None else np.asarray(weights, dtype=float)
        sums = np.bincount(assignment.stratum, weights=w * exposed * np.asarray(exposed_outcomes, dtype=float),
                           minlength=assignment.n_strata)
        present = assignment.exposed_counts > 0
        exposed_rates[present] = sums[present] / assignment.exposed_counts[present]

    rows = []
    for j, (low, high) in enumerate(assignment.score_bounds()):
        n1 = float(assignment.exposed_counts[j])
        n0 = float(assignment.necg_counts[j])
        rows.append({
            "domain_id": domain_id,
            "stratum": j + 1,
            "score_low": low,
            "score_high": high,
            "n_exposed": n1,
            "n_necg": n0,
            "p0": None if np.isnan(estimate.stratum_p0[j]) else float(estimate.stratum_p0[j]),
            "exposed_share": n1 / (n1 + n0) if n1 + n0 > 0 else None,
            "exposed_rate": None if np.isnan(exposed_rates[j]) else float(exposed_rates[j]),
            "merged_into": int(estimate.merged_into[j]) + 1,
        })
    return rows
