# backend/services/simulator.py
"""
Synthetic confounded peer-exposure data with exactly computed ground truth
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List

import numpy as np
import pandas as pd
from scipy.special import expit, logit
from scipy.stats import t as student_t

from models.schemas import FEATURE_CATALOGUE, ArmCounts, GroundTruth, SimConfig, SimulationRecord
from services.dataset import Dataset, UserFeatureStore, sidecar_path, validate_arms, write_observations
from utils.errors import DataError, UsageError

logger = logging.getLogger(__name__)

WORLD_STREAM = 0
USER_STREAM = 1

GENDER_LEVELS = ["female", "male", "unknown"]
UNKNOWN_GENDER_SHARE = 0.04


@dataclass(frozen=True, eq=False)
class World:
    """Domain- and item-level draws shared by every user"""
    domain_ids: List[str]
    item_ids: List[str]
    loadings: np.ndarray
    log_popularity: np.ndarray
    new_domain: np.ndarray
    item_domain: np.ndarray
    item_effect: np.ndarray
    homophily: np.ndarray


@dataclass(frozen=True, eq=False)
class UserDraw:
    index: int
    features: Dict[str, Any]
    prior_shares: Dict[str, int]
    affinity: np.ndarray
    items: np.ndarray
    arms: np.ndarray
    outcomes: np.ndarray
    baseline: np.ndarray
    exposed_probability: np.ndarray
    would_be_exposed: int
    capped: int


def _width(count: int) -> int:
    return max(3, len(str(max(count - 1, 0))))


class SyntheticPeerExposure:
    """
    Users carry latent topic preferences theta_i and domains carry loadings phi_d;
    the affinity <theta_i, phi_d> raises both exposure (through homophily) and
    baseline sharing, which confounds the naive comparison. User activity enters
    exposure only through homophily, so homophily=0 leaves exposure a function of
    domain popularity alone.
    """

    def _draw_world(self, config: SimConfig) -> World:
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, WORLD_STREAM]))
        n_domains, per_domain = config.n_domains, config.n_items_per_domain
        # unit-variance affinity: each factor has variance 1/sqrt(T)
        scale = config.topic_dim ** -0.25
        loadings = rng.normal(0.0, scale, size=(n_domains, config.topic_dim))
        sd = config.popularity_sd
        log_popularity = rng.normal(0.0, sd, size=n_domains) - 0.5 * sd ** 2
        new_domain = np.zeros(n_domains, dtype=bool)
        n_new = int(round(config.new_domain_fraction * n_domains))
        if n_new:
            new_domain[rng.permutation(n_domains)[:n_new]] = True
        item_effect = rng.normal(0.0, config.item_share_sd, size=n_domains * per_domain)
        homophily = np.maximum(config.homophily + config.popularity_confounding * log_popularity, 0.0)

        domain_width = _width(n_domains)
        item_width = _width(per_domain)
        domain_ids = [f"d{d:0{domain_width}d}" for d in range(n_domains)]
        item_ids = [f"{domain_ids[d]}/u{j:0{item_width}d}" for d in range(n_domains) for j in range(per_domain)]
        return World(
            domain_ids=domain_ids,
            item_ids=item_ids,
            loadings=loadings,
            log_popularity=log_popularity,
            new_domain=new_domain,
            item_domain=np.repeat(np.arange(n_domains), per_domain),
            item_effect=item_effect,
            homophily=homophily,
        )

    def _activity_covariates(self, rng: np.random.Generator, theta: np.ndarray, scale: float,
                             log_activity: float) -> Dict[str, Any]:
        activity = float(np.exp(log_activity))
        age = float(np.clip(np.rint(rng.normal(32.0 + 5.0 * theta[0] / scale, 10.0)), 13.0, 90.0))
        female = (1.0 - UNKNOWN_GENDER_SHARE) * float(expit(theta[-1] / scale))
        gender = GENDER_LEVELS[int(rng.choice(3, p=[female, 1.0 - UNKNOWN_GENDER_SHARE - female, UNKNOWN_GENDER_SHARE]))]
        friends = int(rng.poisson(120.0 * activity))
        initiated = int(rng.binomial(friends, 0.45))
        active = float(expit(1.0 + log_activity))
        days_30 = int(rng.binomial(30, active))
        days_91 = days_30 + int(rng.binomial(61, active))
        days_182 = days_91 + int(rng.binomial(91, active))
        return {
            "age": age,
            "gender": gender,
            "friend_count": float(friends),
            "friends_initiated": float(initiated),
            "friends_initiated_share": initiated / friends if friends > 0 else np.nan,
            "tenure_days": float(rng.integers(30, 3650)),
            "has_profile_picture": float(rng.random() < 0.9),
            "days_active_30": float(days_30),
            "days_active_91": float(days_91),
            "days_active_182": float(days_182),
            "action_count": float(rng.poisson(300.0 * activity)),
            "post_count": float(rng.poisson(8.0 * activity)),
            "comment_count": float(rng.poisson(25.0 * activity)),
            "like_count": float(rng.poisson(90.0 * activity)),
        }

    def _draw_user(self, config: SimConfig, world: World, index: int) -> UserDraw:
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, USER_STREAM, index]))
        scale = config.topic_dim ** -0.25
        theta = rng.normal(0.0, scale, size=config.topic_dim)
        log_activity = float(rng.normal(0.0, 0.5))
        user_effect = float(rng.normal(0.0, config.user_share_sd))
        affinity = world.loadings @ theta
        features = self._activity_covariates(rng, theta, scale, log_activity)

        # prior period: shares per domain grow with popularity, activity and affinity
        intensity = np.exp(world.log_popularity + log_activity + affinity) * config.prior_share_rate
        intensity[world.new_domain] = 0.0
        prior = rng.poisson(intensity * config.prior_period_months)
        recent = rng.poisson(intensity * config.activity_window_months)
        features["shares_1m"] = float(recent.sum())
        features["unique_domains_6m"] = float(np.count_nonzero(prior))
        prior_shares = {world.domain_ids[d]: int(prior[d]) for d in np.flatnonzero(prior)}

        item_domain = world.item_domain
        item_affinity = affinity[item_domain]
        exposure_index = (
            logit(config.base_exposure_rate)
            + world.log_popularity[item_domain]
            + world.homophily[item_domain] * (item_affinity + config.activity_effect * log_activity)
        )
        if config.exposure_link == "t":
            exposure = student_t.cdf(exposure_index, config.t_link_df)
        else:
            exposure = expit(exposure_index)
        n_items = len(item_domain)
        would = rng.random(n_items) < exposure
        holdout = rng.random(n_items) < config.holdout_fraction
        sampled = rng.random(n_items) < config.necg_rate
        baseline = expit(
            logit(config.base_share_rate)
            + config.outcome_affinity * item_affinity
            + config.activity_effect * log_activity
            + user_effect
            + world.item_effect
        )
        raised = config.peer_effect * baseline
        exposed_probability = np.minimum(raised, 1.0)
        share_draw = rng.random(n_items)

        arms = np.full(n_items, "", dtype=object)
        arms[would & ~holdout] = "exposed"
        arms[would & holdout] = "exp_control"
        arms[~would & sampled] = "necg"
        observed = np.flatnonzero(arms != "")
        probability = np.where(arms == "exposed", exposed_probability, baseline)
        outcomes = (share_draw < probability).astype(np.int64)
        return UserDraw(
            index=index,
            features=features,
            prior_shares=prior_shares,
            affinity=affinity,
            items=observed,
            arms=arms[observed],
            outcomes=outcomes[observed],
            baseline=baseline[observed],
            exposed_probability=exposed_probability[observed],
            would_be_exposed=int(np.count_nonzero(would)),
            capped=int(np.count_nonzero(would & (raised > 1.0))),
        )

    def generate(self, config: SimConfig, threads: int = 1) -> Dataset:
        """
        Draw a dataset and its ground truth

        Args:
            config: generator settings
            threads: worker count over users; output does not depend on it

        Returns:
            Dataset whose ground_truth averages the generating probabilities over exposed pairs
        """
        world = self._draw_world(config)

        def draw(index: int) -> UserDraw:
            return self._draw_user(config, world, index)

        if threads <= 1:
            draws = [draw(i) for i in range(config.n_users)]
        else:
            with ThreadPoolExecutor(max_workers=threads) as executor:
                draws = list(executor.map(draw, range(config.n_users)))

        would_be_exposed = sum(d.would_be_exposed for d in draws)
        capped = sum(d.capped for d in draws)
        capped_fraction = capped / would_be_exposed if would_be_exposed else 0.0
        if capped_fraction > config.max_capped_fraction:
            raise UsageError(
                f"peer-effect probability cap binds on {100 * capped_fraction:.2f}% of would-be-exposed pairs "
                f"(limit {100 * config.max_capped_fraction:.2f}%); lower peer_effect or base_share_rate"
            )

        dataset = self._assemble(config, world, draws, capped_fraction)
        logger.info(
            f"Simulated {len(dataset)} observations over {dataset.n_users} users and {len(dataset.domain_ids)} domains "
            f"(true RR {dataset.ground_truth.true_rr:.4g})"
        )
        return dataset

    def _assemble(self, config: SimConfig, world: World, draws: List[UserDraw], capped_fraction: float) -> Dataset:
        width = _width(config.n_users)
        user_ids, item_ids, domain_ids, arms, outcomes = [], [], [], [], []
        dense_rows, prior_shares, oracle = {}, {}, {}
        exposed_baseline, exposed_raised = [], []
        for draw in draws:
            if len(draw.items) == 0:
                continue
            user = f"u{draw.index:0{width}d}"
            domains = world.item_domain[draw.items]
            user_ids.extend([user] * len(draw.items))
            item_ids.extend(world.item_ids[k] for k in draw.items)
            domain_ids.extend(world.domain_ids[d] for d in domains)
            arms.extend(draw.arms)
            outcomes.append(draw.outcomes)
            dense_rows[user] = draw.features
            if draw.prior_shares:
                prior_shares[user] = draw.prior_shares
            for d in np.unique(domains):
                oracle[(user, world.domain_ids[d])] = float(draw.affinity[d])
            exposed = draw.arms == "exposed"
            exposed_baseline.append(draw.baseline[exposed])
            exposed_raised.append(draw.exposed_probability[exposed])

        if not user_ids:
            raise DataError("simulation produced no observations; raise n_users or the exposure/NECG rates")
        frame = pd.DataFrame({
            "user_id": np.array(user_ids, dtype=object),
            "item_id": np.array(item_ids, dtype=object),
            "domain_id": np.array(domain_ids, dtype=object),
            "arm": np.array(arms, dtype=object),
            "outcome": np.concatenate(outcomes).astype(np.int64),
        })

        columns = [variable.name for variable in FEATURE_CATALOGUE]
        dense = pd.DataFrame.from_dict(dense_rows, orient="index")[columns].sort_index()
        for variable in FEATURE_CATALOGUE:
            dense[variable.name] = dense[variable.name].astype(object if variable.transform == "categorical" else float)
        dense.index.name = "user_id"
        features = UserFeatureStore(
            dense=dense,
            prior_shares=dict(sorted(prior_shares.items())),
            has_prior_shares=True,
            same_domain=None,
            oracle=oracle,
        )

        baseline = np.concatenate(exposed_baseline)
        raised = np.concatenate(exposed_raised)
        if len(baseline) == 0:
            raise DataError("simulation produced no exposed pairs; raise base_exposure_rate or n_users")
        ground_truth = GroundTruth(
            true_p0_exposed=float(np.mean(baseline)),
            true_p1_exposed=float(np.mean(raised)),
            n_exposed=len(baseline),
        )
        dataset = Dataset.from_frame(frame, features, {"source": "simulation"}, ground_truth)
        summary = validate_arms(dataset)
        record = SimulationRecord(
            config=config,
            ground_truth=ground_truth,
            arm_counts={"total": summary.total, **{
                entry.domain_id: ArmCounts(exposed=entry.exposed, exp_control=entry.exp_control, necg=entry.necg)
                for entry in summary.domains
            }},
            capped_fraction=capped_fraction,
        )
        dataset.provenance["simulation"] = record
        return dataset

    def emit(self, dataset: Dataset, path: str, format: str = "ndjson") -> List[Path]:
        """Write observations plus the ground-truth sidecar next to them"""
        record = dataset.provenance.get("simulation")
        if not isinstance(record, SimulationRecord):
            raise DataError("dataset carries no simulation record to write as a sidecar")
        data_path = write_observations(dataset, path, format)
        sidecar = sidecar_path(str(data_path))
        try:
            sidecar.write_text(record.model_dump_json(indent=2) + "\n", encoding="utf-8")
        except OSError as e:
            logger.error(f"Sidecar write error for {sidecar}: {e}")
            raise DataError(f"cannot write ground truth sidecar {sidecar}: {e}")
        logger.info(f"Wrote ground truth sidecar to {sidecar}")
        return [data_path, sidecar]


# Create global generator instance
simulator = SyntheticPeerExposure()


def generate(config: SimConfig, threads: int = 1) -> Dataset:
    return simulator.generate(config, threads)


def emit(dataset: Dataset, path: str, format: str = "ndjson") -> List[Path]:
    return simulator.emit(dataset, path, format)
