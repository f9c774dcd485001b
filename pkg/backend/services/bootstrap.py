# backend/services/bootstrap.py
"""
Multiway (user x item) bootstrap with normal intervals

The two-way variance combines one-way replicate families drawn from the
same scheme, one per resampled factor (USER_FAMILY, ITEM_FAMILY, ROW_FAMILY).
var = var_user + var_item - var_row, the two-way clustering identity; a
non-positive combination falls back to the larger one-way variance. The
product-weight scheme (every observation weighted by user times item
weight) stays available and re-counts row noise in both factors.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import norm

from models.schemas import BootstrapConfig, Interval, ModelSpec, PropensityFit
from services.bias_metrics import bias_quantities
from services.dataset import Dataset
from services.estimators import Evaluation, PopularityBuckets, evaluate_specs, subgroup_estimates
from utils.errors import BootstrapError, DataError, DegenerateLabelsError

logger = logging.getLogger(__name__)

USER_FACTOR = 0
ITEM_FACTOR = 1
ROW_FACTOR = 2

USER_FAMILY = "user"
ITEM_FAMILY = "item"
ROW_FAMILY = "row"
JOINT_FAMILY = "joint"
TWOWAY_FAMILIES = (USER_FAMILY, ITEM_FAMILY, ROW_FAMILY)

Quantities = Dict[str, Optional[float]]
Pipeline = Callable[[np.ndarray], Quantities]


@dataclass(frozen=True, eq=False)
class ReplicateWeights:
    user: np.ndarray
    item: np.ndarray
    observation: np.ndarray


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    intervals: Dict[str, Interval]
    n_replicates: int
    n_dropped: int
    replicates: List[Dict[str, Any]] = field(default_factory=list)


def factor_rng(seed: int, replicate: int, factor: int) -> np.random.Generator:
    """Independent stream per (seed, replicate, factor); scheduling order cannot change it"""
    return np.random.default_rng(np.random.SeedSequence([seed, replicate, factor]))


def _cluster_weights(scheme: str, n_clusters: int, rng: np.random.Generator) -> np.ndarray:
    if scheme == "poisson":
        return rng.poisson(1.0, n_clusters).astype(float)
    return rng.multinomial(n_clusters, np.full(n_clusters, 1.0 / n_clusters)).astype(float)


def replicate_families(config: BootstrapConfig) -> Tuple[str, ...]:
    """Replicate families run per replicate index"""
    if config.scheme in ("multinomial", "poisson") and config.variance == "twoway":
        return TWOWAY_FAMILIES
    return (JOINT_FAMILY,)


def replicate_weights(
    dataset: Dataset,
    config: BootstrapConfig,
    replicate: int,
    family: str = JOINT_FAMILY,
) -> ReplicateWeights:
    """
    Observation weights for one replicate of one family

    The joint family of multinomial/poisson multiplies independent user and
    item weights per observation; the user, item and row families resample one
    factor and leave the other at 1. iid resamples rows (one-way reference);
    unit is all ones.
    """
    n_users, n_items, n_rows = dataset.n_users, dataset.n_items, len(dataset)
    if config.scheme == "unit":
        return ReplicateWeights(user=np.ones(n_users), item=np.ones(n_items), observation=np.ones(n_rows))
    if config.scheme == "iid" or family == ROW_FAMILY:
        scheme = "multinomial" if config.scheme == "iid" else config.scheme
        rows = _cluster_weights(scheme, n_rows, factor_rng(config.seed, replicate, ROW_FACTOR))
        return ReplicateWeights(user=np.ones(n_users), item=np.ones(n_items), observation=rows)
    user = np.ones(n_users)
    item = np.ones(n_items)
    if family in (JOINT_FAMILY, USER_FAMILY):
        user = _cluster_weights(config.scheme, n_users, factor_rng(config.seed, replicate, USER_FACTOR))
    if family in (JOINT_FAMILY, ITEM_FAMILY):
        item = _cluster_weights(config.scheme, n_items, factor_rng(config.seed, replicate, ITEM_FACTOR))
    return ReplicateWeights(user=user, item=item, observation=user[dataset.user_codes] * item[dataset.item_codes])


def _variance(values: np.ndarray) -> float:
    if np.all(values == values[0]):
        return 0.0
    return float(np.var(values, ddof=1))


def twoway_variance(user: float, item: float, row: float) -> float:
    """var_user + var_item - var_row, or the larger one-way variance when that is not positive"""
    combined = user + item - row
    if combined > 0.0:
        return combined
    return max(user, item)


def _interval(point: Optional[float], samples: Dict[str, np.ndarray], config: BootstrapConfig) -> Interval:
    finite = {family: values[np.isfinite(values)] for family, values in samples.items()}
    reference_family = USER_FAMILY if USER_FAMILY in finite else JOINT_FAMILY
    reference = finite[reference_family]
    if point is None or min(len(values) for values in finite.values()) < 2:
        return Interval(point=point, n_replicates=len(reference))
    variances = {family: _variance(values) for family, values in finite.items()}
    if reference_family == JOINT_FAMILY:
        variance = variances[JOINT_FAMILY]
    else:
        variance = twoway_variance(variances[USER_FAMILY], variances[ITEM_FAMILY], variances[ROW_FAMILY])
    sd = float(np.sqrt(variance))
    if config.interval == "percentile":
        alpha = 2.0 * float(norm.sf(config.z))
        low, high = np.quantile(reference, [alpha / 2.0, 1.0 - alpha / 2.0])
        reference_sd = float(np.sqrt(variances[reference_family]))
        if reference_sd > 0.0 and reference_sd != sd:
            # user-family quantiles, spread rescaled about their mean to the two-way sd
            center = float(np.mean(reference))
            ratio = sd / reference_sd
            low, high = center + (low - center) * ratio, center + (high - center) * ratio
        return Interval(point=point, low=float(low), high=float(high), sd=sd, n_replicates=len(reference))
    return Interval(point=point, low=point - config.z * sd, high=point + config.z * sd, sd=sd, n_replicates=len(reference))


def bootstrap_ci(
    dataset: Dataset,
    pipeline: Pipeline,
    point: Quantities,
    config: BootstrapConfig,
    threads: int = 1,
) -> BootstrapResult:
    """
    Rerun the weighted pipeline on every replicate and form intervals

    Args:
        dataset: observations whose user and item codes define the clusters
        pipeline: weights -> quantities; must be deterministic given weights
        point: unweighted point estimates, keyed like the pipeline output
        config: replicate count, weight scheme, variance, interval type, seed
        threads: worker count over replicates

    Returns:
        BootstrapResult (raises BootstrapError when too many replicates drop)
    """
    families = replicate_families(config)

    def run(replicate: int) -> Optional[Dict[str, Quantities]]:
        outputs = {}
        for family in families:
            weights = replicate_weights(dataset, config, replicate, family).observation
            try:
                outputs[family] = pipeline(weights)
            except (DataError, DegenerateLabelsError) as e:
                logger.debug(f"Replicate {replicate} ({family}) dropped: {e.detail}")
                return None
        return outputs

    if threads <= 1:
        outputs = [run(b) for b in range(config.replicates)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            outputs = list(executor.map(run, range(config.replicates)))

    kept = [output for output in outputs if output is not None]
    dropped = len(outputs) - len(kept)
    if dropped:
        logger.warning(f"Dropped {dropped} of {config.replicates} bootstrap replicates (zero weight in a required arm)")
    if dropped > config.max_drop_fraction * config.replicates or len(kept) < 2:
        raise BootstrapError(
            f"{dropped} of {config.replicates} bootstrap replicates dropped",
            dropped=dropped,
            replicates=config.replicates,
        )

    intervals = {}
    for key, value in point.items():
        samples = {
            family: np.array(
                [np.nan if output[family].get(key) is None else output[family][key] for output in kept],
                dtype=float,
            )
            for family in families
        }
        intervals[key] = _interval(value, samples, config)

    replicates = []
    if config.dump_replicates:
        for b, output in enumerate(outputs):
            for family in families:
                row: Dict[str, Any] = {"replicate": b, "family": family, "dropped": output is None}
                row.update({key: (None if output is None else output[family].get(key)) for key in point})
                replicates.append(row)
    logger.info(
        f"Bootstrap finished: {len(kept)} replicates ({config.scheme} weights, "
        f"{'+'.join(families)} families, {config.interval} intervals)"
    )
    return BootstrapResult(intervals=intervals, n_replicates=len(kept), n_dropped=dropped, replicates=replicates)


def evaluation_quantities(
    dataset: Dataset,
    evaluation: Evaluation,
    buckets: Optional[PopularityBuckets] = None,
    weights: Optional[np.ndarray] = None,
) -> Quantities:
    """Estimates, bias metrics and subgroup estimates keyed by dotted quantity names"""
    values = evaluation.quantities()
    values.update(bias_quantities(evaluation.estimates))
    if buckets is not None:
        for subgroup in subgroup_estimates(dataset, evaluation, buckets, weights):
            for estimate in subgroup.estimates:
                prefix = f"subgroup{subgroup.bucket}.{estimate.label}"
                values[f"{prefix}.p0"] = estimate.p0
                values[f"{prefix}.rr"] = estimate.rr
                values[f"{prefix}.delta"] = estimate.delta
    return values


def evaluation_pipeline(
    dataset: Dataset,
    specs: Sequence[ModelSpec],
    config: BootstrapConfig,
    point_fits: Optional[Dict[str, Dict[str, PropensityFit]]] = None,
    grand_naive: bool = False,
    buckets: Optional[PopularityBuckets] = None,
) -> Pipeline:
    """
    Weighted rerun of the whole evaluation; experimental and observational
    quantities share the replicate weights so their differences are bootstrapped
    together. Without refit_propensity the point fits are reused (fixed scores,
    anti-conservative).
    """
    fixed = None if config.refit_propensity else (point_fits or {})

    def pipeline(weights: np.ndarray) -> Quantities:
        evaluation = evaluate_specs(dataset, specs, weights, threads=1, fixed_fits=fixed, grand_naive=grand_naive)
        return evaluation_quantities(dataset, evaluation, buckets, weights)

    return pipeline
