# backend/services/estimators.py
"""
Experimental, naive and propensity-stratified estimates of p0, p1, RR and delta
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from models.schemas import Arm, DomainEstimate, EffectEstimate, ModelSpec, PropensityFit, SubgroupEstimate
from services import ridge_logit
from services.dataset import Dataset
from services.featurize import DesignMatrix, apply_scaling, build_design, standardize
from services.stratify import assign_strata, quantile_buckets, strata_p0, strata_table, weighted_total
from utils.errors import DataError, DegenerateLabelsError, DimensionMismatchError, MissingFeatureError, UsageError

logger = logging.getLogger(__name__)

EXPERIMENTAL_LABEL = "exp"
NAIVE_LABEL = "naive"
GRAND_NAIVE_LABEL = "naive_grand"


def _observation_weights(dataset: Dataset, weights: Optional[np.ndarray]) -> np.ndarray:
    if weights is None:
        return np.ones(len(dataset))
    weights = np.asarray(weights, dtype=float)
    if len(weights) != len(dataset):
        raise DimensionMismatchError(f"{len(weights)} weights for {len(dataset)} observations")
    return weights


def _arm_sums(dataset: Dataset, arm: Arm, weights: np.ndarray, row_mask: Optional[np.ndarray] = None) -> Tuple[float, float]:
    """(weighted outcome sum, weight sum) over one arm"""
    positions, outcomes = dataset.arm_outcomes(arm)
    if row_mask is not None:
        keep = row_mask[positions]
        positions, outcomes = positions[keep], outcomes[keep]
    w = weights[positions]
    return weighted_total(w * outcomes), weighted_total(w)


def _domain_counts(dataset: Dataset, domain_id: str, weights: np.ndarray) -> Tuple[float, Optional[float]]:
    """Weighted exposed count n1_d and the raw NECG share rate of a domain"""
    rows = dataset.domain_slices[domain_id]
    domain_weights = weights[rows]
    exposed_positions, _ = dataset.arm_outcomes(Arm.EXPOSED, rows)
    n_exposed = weighted_total(domain_weights[exposed_positions])
    necg_positions, outcomes = dataset.arm_outcomes(Arm.NECG_UNEXPOSED, rows)
    necg_weights = domain_weights[necg_positions]
    n_necg = weighted_total(necg_weights)
    p0 = weighted_total(necg_weights * outcomes) / n_necg if n_necg > 0 else None
    return n_exposed, p0


def pool_domains(domains: Sequence[DomainEstimate], label: str = "") -> Tuple[float, List[DomainEstimate], List[str]]:
    """
    p0 = sum_d (n1_d / n1) * p0_d over domains with exposed pairs and a p0

    Domains with exposed pairs but no p0 (no NECG rows) are excluded and
    flagged; the remaining exposure weights are renormalized.
    """
    contributing = [entry for entry in domains if entry.n_exposed > 0 and entry.p0 is not None]
    excluded = [entry.domain_id for entry in domains if entry.n_exposed > 0 and entry.p0 is None]
    if not contributing:
        raise DataError(f"{label or 'estimate'}: no domain has both exposed and NECG rows")
    total = 0.0
    for entry in contributing:
        total += entry.n_exposed
    p0 = 0.0
    for entry in contributing:
        p0 += (entry.n_exposed / total) * entry.p0
    keep = {entry.domain_id for entry in contributing}
    weighted = [
        entry.model_copy(update={"weight": entry.n_exposed / total if entry.domain_id in keep else 0.0})
        for entry in domains
    ]
    flags = [f"no_necg:{domain_id}" for domain_id in excluded]
    if excluded:
        logger.warning(f"{label}: excluded {len(excluded)} domains with exposed pairs but no NECG rows")
    return min(max(p0, 0.0), 1.0), weighted, flags


def estimate_p1(dataset: Dataset, weights: Optional[np.ndarray] = None, row_mask: Optional[np.ndarray] = None) -> float:
    """Share rate over exposed pairs; the single p1 every estimator reports"""
    total, weight = _arm_sums(dataset, Arm.EXPOSED, _observation_weights(dataset, weights), row_mask)
    if weight <= 0:
        raise DataError("no exposed rows")
    return total / weight


def estimate_experimental(
    dataset: Dataset,
    weights: Optional[np.ndarray] = None,
    row_mask: Optional[np.ndarray] = None,
    p1: Optional[float] = None,
) -> EffectEstimate:
    """p0 from the randomized holdout of would-be-exposed pairs (an ATT)"""
    w = _observation_weights(dataset, weights)
    total, weight = _arm_sums(dataset, Arm.EXPERIMENTAL_CONTROL, w, row_mask)
    if weight <= 0:
        raise DataError("no experimental-control rows")
    p1 = estimate_p1(dataset, w, row_mask) if p1 is None else p1
    return EffectEstimate(label=EXPERIMENTAL_LABEL, p0=total / weight, p1=p1)


def naive_domain_estimates(dataset: Dataset, weights: Optional[np.ndarray] = None) -> List[DomainEstimate]:
    w = _observation_weights(dataset, weights)
    domains = []
    for domain_id in dataset.domain_ids:
        n_exposed, p0 = _domain_counts(dataset, domain_id, w)
        flags = ["zero_weight"] if n_exposed <= 0 else []
        domains.append(DomainEstimate(domain_id=domain_id, n_exposed=n_exposed, p0=p0, n_strata=1, flags=flags))
    return domains


def estimate_naive(dataset: Dataset, weights: Optional[np.ndarray] = None, p1: Optional[float] = None) -> EffectEstimate:
    """Raw NECG share rate per domain, post-stratified by domain with exposure weights"""
    w = _observation_weights(dataset, weights)
    if not np.any(dataset.arm_mask(Arm.NECG_UNEXPOSED)):
        raise DataError("no NECG rows")
    p0, domains, flags = pool_domains(naive_domain_estimates(dataset, w), NAIVE_LABEL)
    p1 = estimate_p1(dataset, w) if p1 is None else p1
    return EffectEstimate(label=NAIVE_LABEL, p0=p0, p1=p1, domains=domains, flags=flags)


def estimate_grand_naive(
    dataset: Dataset,
    weights: Optional[np.ndarray] = None,
    row_mask: Optional[np.ndarray] = None,
    p1: Optional[float] = None,
) -> EffectEstimate:
    """Diagnostic only: NECG share rate pooled over all domains without post-stratification"""
    w = _observation_weights(dataset, weights)
    total, weight = _arm_sums(dataset, Arm.NECG_UNEXPOSED, w, row_mask)
    if weight <= 0:
        raise DataError("no NECG rows")
    p1 = estimate_p1(dataset, w, row_mask) if p1 is None else p1
    return EffectEstimate(label=GRAND_NAIVE_LABEL, p0=total / weight, p1=p1)


# Propensity-stratified estimator


@dataclass(frozen=True, eq=False)
class DomainFitResult:
    estimate: DomainEstimate
    fit: Optional[PropensityFit] = None
    strata: List[Dict[str, Any]] = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class AdjustedRun:
    estimate: EffectEstimate
    domains: List[DomainFitResult]

    @property
    def fits(self) -> Dict[str, PropensityFit]:
        return {result.estimate.domain_id: result.fit for result in self.domains if result.fit is not None}

    @property
    def strata_rows(self) -> List[Dict[str, Any]]:
        rows = []
        for result in self.domains:
            rows.extend(result.strata)
        return rows


def _design_outcomes(dataset: Dataset, design: DesignMatrix) -> np.ndarray:
    """Outcomes aligned to design rows, read arm by arm"""
    rows = dataset.domain_slices[design.domain_id]
    outcomes = np.zeros(design.n_rows)
    for arm in (Arm.EXPOSED, Arm.NECG_UNEXPOSED):
        positions, values = dataset.arm_outcomes(arm, rows)
        outcomes[np.searchsorted(design.rows, rows.start + positions)] = values
    return outcomes


def _fit_domain(
    design: DesignMatrix,
    spec: ModelSpec,
    row_weights: np.ndarray,
    fixed_fit: Optional[PropensityFit],
    use_fixed: bool,
) -> Tuple[Optional[PropensityFit], DesignMatrix]:
    if use_fixed:
        if fixed_fit is None:
            raise DegenerateLabelsError(f"domain {design.domain_id}: no stored fit")
        if fixed_fit.scaling is not None:
            design = apply_scaling(design, fixed_fit.scaling)
        return fixed_fit, design
    scaling = None
    if spec.standardize:
        design, scaling = standardize(design)
    fit_result = ridge_logit.fit(
        design,
        design.labels,
        spec.penalty,
        weights=row_weights,
        penalty_scale=spec.penalty_scale,
        scaling=scaling,
    )
    return fit_result.model_copy(update={"spec_name": spec.name}), design


def adjusted_domain(
    dataset: Dataset,
    domain_id: str,
    spec: ModelSpec,
    weights: Optional[np.ndarray] = None,
    fixed_fits: Optional[Dict[str, PropensityFit]] = None,
    collect_strata: bool = False,
) -> DomainFitResult:
    """build_design -> fit -> predict_scores -> assign_strata -> strata_p0 for one domain"""
    w = _observation_weights(dataset, weights)
    n_exposed, naive_p0 = _domain_counts(dataset, domain_id, w)
    if n_exposed <= 0:
        entry = DomainEstimate(domain_id=domain_id, n_exposed=0.0, p0=naive_p0, n_strata=1, flags=["zero_weight"])
        return DomainFitResult(estimate=entry)
    if naive_p0 is None:
        logger.warning(f"Domain {domain_id}: exposed pairs but no NECG rows; excluded from observational pooling")
        entry = DomainEstimate(domain_id=domain_id, n_exposed=n_exposed, p0=None, n_strata=0, flags=["no_necg"])
        return DomainFitResult(estimate=entry)

    design = build_design(dataset, domain_id, spec)
    row_weights = w[design.rows]
    use_fixed = fixed_fits is not None
    try:
        fit_result, design = _fit_domain(design, spec, row_weights, (fixed_fits or {}).get(domain_id), use_fixed)
    except DegenerateLabelsError as e:
        logger.warning(f"Domain {domain_id}: {e.detail}; falling back to a single stratum")
        entry = DomainEstimate(domain_id=domain_id, n_exposed=n_exposed, p0=naive_p0, n_strata=1, flags=["degenerate_fit"])
        return DomainFitResult(estimate=entry)

    scores = ridge_logit.predict_scores(fit_result, design)
    assignment = assign_strata(scores, design.labels, spec.strata_policy, row_weights)
    outcomes = _design_outcomes(dataset, design)
    strata = strata_p0(assignment, outcomes, design.labels, row_weights)

    flags = list(strata.flags)
    if not fit_result.converged:
        flags.append("not_converged")
    entry = DomainEstimate(
        domain_id=domain_id,
        n_exposed=n_exposed,
        p0=min(max(strata.p0, 0.0), 1.0),
        n_strata=assignment.n_strata,
        flags=flags,
    )
    rows = []
    if collect_strata:
        rows = strata_table(domain_id, assignment, strata, outcomes, design.labels, row_weights)
        for row in rows:
            row["spec"] = spec.name
    return DomainFitResult(estimate=entry, fit=fit_result, strata=rows)


def _map_domains(function: Callable[[str], Any], domain_ids: Iterable[str], threads: int) -> List[Any]:
    """Ordered map over domains; results never depend on the pool size"""
    domain_ids = list(domain_ids)
    if threads <= 1 or len(domain_ids) <= 1:
        return [function(domain_id) for domain_id in domain_ids]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(function, domain_ids))


def run_adjusted(
    dataset: Dataset,
    spec: ModelSpec,
    weights: Optional[np.ndarray] = None,
    threads: int = 1,
    fixed_fits: Optional[Dict[str, PropensityFit]] = None,
    collect_strata: bool = False,
    p1: Optional[float] = None,
) -> AdjustedRun:
    """
    Propensity-stratified estimate with per-domain details

    Args:
        dataset: observations and features
        spec: covariate blocks, penalty and strata policy (not the naive spec)
        weights: observation weights (bootstrap replicates)
        threads: worker count for the per-domain pipelines
        fixed_fits: reuse these fits instead of refitting (fixed-score mode)
        collect_strata: keep per-stratum diagnostics rows

    Returns:
        AdjustedRun with the pooled EffectEstimate, fits and strata rows
    """
    if spec.is_naive:
        raise UsageError("the adjusted estimator needs a spec with covariate blocks")
    w = _observation_weights(dataset, weights)

    def run_domain(domain_id: str) -> DomainFitResult:
        return adjusted_domain(dataset, domain_id, spec, w, fixed_fits, collect_strata)

    results = _map_domains(run_domain, dataset.domain_ids, threads)
    contributing = [r.estimate for r in results if r.estimate.n_exposed > 0 and r.estimate.p0 is not None]
    if contributing and all("degenerate_fit" in entry.flags for entry in contributing):
        raise DegenerateLabelsError(f"{spec.name}: every domain has degenerate exposure labels")

    p0, domains, flags = pool_domains([r.estimate for r in results], spec.name)
    for entry in domains:
        for flag in entry.flags:
            if flag in ("degenerate_fit", "not_converged"):
                flags.append(f"{flag}:{entry.domain_id}")
    p1 = estimate_p1(dataset, w) if p1 is None else p1
    estimate = EffectEstimate(label=spec.name, p0=p0, p1=p1, domains=domains, flags=flags)
    merged = [
        DomainFitResult(estimate=entry, fit=result.fit, strata=result.strata)
        for entry, result in zip(domains, results)
    ]
    return AdjustedRun(estimate=estimate, domains=merged)


def estimate_adjusted(
    dataset: Dataset,
    spec: ModelSpec,
    weights: Optional[np.ndarray] = None,
    threads: int = 1,
    fixed_fits: Optional[Dict[str, PropensityFit]] = None,
) -> EffectEstimate:
    return run_adjusted(dataset, spec, weights, threads, fixed_fits).estimate


# Whole-run evaluation


@dataclass(frozen=True, eq=False)
class Evaluation:
    """Every requested estimator on one set of observation weights"""
    estimates: Dict[str, EffectEstimate]
    adjusted: Dict[str, AdjustedRun] = field(default_factory=dict)

    def quantities(self) -> Dict[str, Optional[float]]:
        values: Dict[str, Optional[float]] = {}
        for label, estimate in self.estimates.items():
            values[f"{label}.p0"] = estimate.p0
            values[f"{label}.rr"] = estimate.rr
            values[f"{label}.delta"] = estimate.delta
        return values


def has_experimental_arm(dataset: Dataset) -> bool:
    return bool(np.any(dataset.arm_mask(Arm.EXPERIMENTAL_CONTROL)))


def evaluate_specs(
    dataset: Dataset,
    specs: Sequence[ModelSpec],
    weights: Optional[np.ndarray] = None,
    threads: int = 1,
    fixed_fits: Optional[Dict[str, Dict[str, PropensityFit]]] = None,
    grand_naive: bool = False,
    collect_strata: Sequence[str] = (),
) -> Evaluation:
    """Experimental, naive and every adjusted spec, sharing one p1"""
    w = _observation_weights(dataset, weights)
    p1 = estimate_p1(dataset, w)
    estimates: Dict[str, EffectEstimate] = {}
    adjusted: Dict[str, AdjustedRun] = {}
    if has_experimental_arm(dataset):
        estimates[EXPERIMENTAL_LABEL] = estimate_experimental(dataset, w, p1=p1)
    estimates[NAIVE_LABEL] = estimate_naive(dataset, w, p1=p1)
    if grand_naive:
        estimates[GRAND_NAIVE_LABEL] = estimate_grand_naive(dataset, w, p1=p1)
    for spec in specs:
        if spec.is_naive:
            continue
        run = run_adjusted(
            dataset,
            spec,
            w,
            threads,
            fixed_fits=None if fixed_fits is None else fixed_fits.get(spec.name, {}),
            collect_strata=spec.name in collect_strata,
            p1=p1,
        )
        adjusted[spec.name] = run
        estimates[spec.name] = run.estimate
    return Evaluation(estimates=estimates, adjusted=adjusted)


def penalty_sweep(
    dataset: Dataset,
    specs: Sequence[ModelSpec],
    penalties: Sequence[float],
    threads: int = 1,
) -> List[Dict[str, Any]]:
    """Re-estimate every adjusted spec at each penalty"""
    p1 = estimate_p1(dataset)
    rows = []
    for spec in specs:
        if spec.is_naive:
            continue
        for penalty in penalties:
            estimate = run_adjusted(dataset, spec.model_copy(update={"penalty": penalty}), threads=threads, p1=p1).estimate
            rows.append({
                "spec": spec.name,
                "penalty": penalty,
                "p0": estimate.p0,
                "p1": estimate.p1,
                "rr": estimate.rr,
                "delta": estimate.delta,
                "flagged_domains": len(estimate.flags),
            })
            logger.info(f"Penalty sweep {spec.name} lambda={penalty}: p0={estimate.p0:.4e} rr={estimate.rr}")
    return rows


# Subgroups by prior domain popularity


@dataclass(frozen=True, eq=False)
class PopularityBuckets:
    assignment: Dict[str, int]
    popularity: Dict[str, int]
    requested: int

    @property
    def n_buckets(self) -> int:
        return len(set(self.assignment.values()))

    def domains(self, bucket: int) -> List[str]:
        return [domain_id for domain_id, b in self.assignment.items() if b == bucket]


def popularity_buckets(dataset: Dataset, k: int = 5) -> PopularityBuckets:
    """Domains bucketed by quantiles of the number of unique users with prior shares from them"""
    if k < 2:
        raise UsageError("subgroup count k must be >= 2")
    if not dataset.features.has_prior_shares:
        raise MissingFeatureError("subgroups require prior shares by domain")
    counts = dataset.features.domain_popularity()
    popularity = {domain_id: counts.get(domain_id, 0) for domain_id in dataset.domain_ids}
    buckets = quantile_buckets(np.array(list(popularity.values()), dtype=float), k)
    assignment = {domain_id: int(b) for domain_id, b in zip(popularity, buckets)}
    result = PopularityBuckets(assignment=assignment, popularity=popularity, requested=k)
    if result.n_buckets < k:
        logger.warning(f"Only {result.n_buckets} nonempty popularity buckets of {k} requested (tied popularity)")
    return result


def subgroup_estimates(
    dataset: Dataset,
    evaluation: Evaluation,
    buckets: PopularityBuckets,
    weights: Optional[np.ndarray] = None,
) -> List[SubgroupEstimate]:
    """Re-pool an evaluation's per-domain results within each popularity bucket"""
    w = _observation_weights(dataset, weights)
    collapsed = buckets.n_buckets < buckets.requested
    results = []
    for bucket in range(buckets.n_buckets):
        domain_ids = buckets.domains(bucket)
        members = set(domain_ids)
        row_mask = np.zeros(len(dataset), dtype=bool)
        for domain_id in domain_ids:
            row_mask[dataset.domain_slices[domain_id]] = True
        values = [buckets.popularity[d] for d in domain_ids]
        flags = [f"collapsed_buckets:{buckets.n_buckets}/{buckets.requested}"] if collapsed else []
        subgroup = SubgroupEstimate(
            bucket=bucket + 1,
            n_domains=len(domain_ids),
            popularity_low=min(values),
            popularity_high=max(values),
            flags=flags,
        )
        try:
            p1 = estimate_p1(dataset, w, row_mask)
        except DataError:
            subgroup.flags.append("no_exposed")
            results.append(subgroup)
            continue
        for label, estimate in evaluation.estimates.items():
            try:
                if label == EXPERIMENTAL_LABEL:
                    subgroup.estimates.append(estimate_experimental(dataset, w, row_mask, p1))
                elif label == GRAND_NAIVE_LABEL:
                    subgroup.estimates.append(estimate_grand_naive(dataset, w, row_mask, p1))
                else:
                    p0, domains, pool_flags = pool_domains([d for d in estimate.domains if d.domain_id in members], label)
                    subgroup.estimates.append(
                        EffectEstimate(label=label, p0=p0, p1=p1, domains=domains, flags=pool_flags)
                    )
            except DataError as e:
                subgroup.flags.append(f"{label}:{e.detail}")
        results.append(subgroup)
    return results


def subgroup_by_prior_popularity(
    dataset: Dataset,
    specs: Sequence[ModelSpec],
    k: int = 5,
    weights: Optional[np.ndarray] = None,
    threads: int = 1,
) -> List[SubgroupEstimate]:
    """All estimators recomputed within quantile buckets of prior domain popularity"""
    buckets = popularity_buckets(dataset, k)
    evaluation = evaluate_specs(dataset, specs, weights, threads)
    return subgroup_estimates(dataset, evaluation, buckets, weights)
