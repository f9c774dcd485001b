# backend/models/schemas.py
import math
from enum import Enum
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, computed_field, field_validator, model_validator


class Arm(str, Enum):
    """Arm of a user-item pair; values are the labels used in input files"""
    EXPOSED = "exposed"
    EXPERIMENTAL_CONTROL = "exp_control"
    NECG_UNEXPOSED = "necg"


ARM_LABELS = [arm.value for arm in Arm]

# Covariate blocks: D demographics, A all base variables, s same-domain prior
# shares, M other-domain prior shares, O true confounder (simulated data only)
BLOCKS = ("D", "A", "s", "M", "O")

MODEL_BLOCKS: Dict[str, Tuple[str, ...]] = {
    "naive": (),
    "D": ("D",),
    "A": ("A",),
    "Ds": ("D", "s"),
    "As": ("A", "s"),
    "M": ("M",),
    "Ms": ("M", "s"),
    "AM": ("A", "M"),
    "AMs": ("A", "M", "s"),
    "oracle": ("O",),
}

TABLE_SPECS = ["naive", "D", "A", "Ds", "As", "M", "Ms", "AM", "AMs"]


class RawVariable(BaseModel):
    """A dense per-user covariate and the transform applied before fitting"""
    model_config = ConfigDict(frozen=True)

    name: str
    blocks: Tuple[str, ...]
    transform: Literal["identity", "poly2", "log1p", "log1p_indicator", "categorical"]
    is_count: bool = False
    levels: Tuple[str, ...] = ()
    reference_level: Optional[str] = None


FEATURE_CATALOGUE: List[RawVariable] = [
    RawVariable(name="age", blocks=("D", "A"), transform="poly2"),
    RawVariable(name="gender", blocks=("D", "A"), transform="categorical",
                levels=("female", "male", "unknown"), reference_level="unknown"),
    RawVariable(name="friend_count", blocks=("A",), transform="identity", is_count=True),
    RawVariable(name="friends_initiated", blocks=("A",), transform="identity", is_count=True),
    RawVariable(name="friends_initiated_share", blocks=("A",), transform="identity"),
    RawVariable(name="tenure_days", blocks=("A",), transform="log1p", is_count=True),
    RawVariable(name="has_profile_picture", blocks=("A",), transform="identity"),
    RawVariable(name="days_active_30", blocks=("A",), transform="identity", is_count=True),
    RawVariable(name="days_active_91", blocks=("A",), transform="identity", is_count=True),
    RawVariable(name="days_active_182", blocks=("A",), transform="identity", is_count=True),
    RawVariable(name="action_count", blocks=("A",), transform="log1p", is_count=True),
    RawVariable(name="post_count", blocks=("A",), transform="log1p", is_count=True),
    RawVariable(name="comment_count", blocks=("A",), transform="log1p", is_count=True),
    RawVariable(name="like_count", blocks=("A",), transform="log1p", is_count=True),
    RawVariable(name="shares_1m", blocks=("A",), transform="log1p_indicator", is_count=True),
    RawVariable(name="unique_domains_6m", blocks=("A",), transform="log1p", is_count=True),
]

CATALOGUE_BY_NAME = {variable.name: variable for variable in FEATURE_CATALOGUE}


def parse_spec_name(name: str) -> Tuple[str, ...]:
    """Blocks for a spec name: a Table-style name or any composition of D, A, M, s"""
    if name in MODEL_BLOCKS:
        return MODEL_BLOCKS[name]
    letters = tuple(name)
    if not letters or any(letter not in ("D", "A", "M", "s") for letter in letters) or len(set(letters)) != len(letters):
        raise ValueError(f"unknown model spec '{name}'")
    return letters


class StrataPolicy(BaseModel):
    """Number of propensity strata per domain: J = clamp(round(c * sqrt(n1)), j_min, j_max)"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    c: float = Field(1.0, gt=0)
    j_min: int = Field(1, ge=1)
    j_max: int = Field(500, ge=1)
    fixed_j: Optional[int] = Field(None, ge=1, description="Override the count rule, e.g. 100 for diagnostics")
    pool: Literal["both", "exposed"] = Field("both", description="Rows whose scores define the quantiles")

    @model_validator(mode="after")
    def _check_bounds(self):
        if self.j_max < self.j_min:
            raise ValueError("j_max must be >= j_min")
        return self

    def n_strata(self, n_exposed: float) -> int:
        if self.fixed_j is not None:
            return self.fixed_j
        target = int(math.floor(self.c * math.sqrt(max(n_exposed, 0.0)) + 0.5))
        return min(max(target, self.j_min), self.j_max)


class ModelSpec(BaseModel):
    """Named covariate composition plus penalty and strata policy"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    blocks: Tuple[str, ...] = ()
    penalty: float = Field(0.5, ge=0)
    penalty_scale: Literal["total", "per_observation"] = "total"
    standardize: bool = True
    missing_indicators: bool = False
    strata_policy: StrataPolicy = Field(default_factory=StrataPolicy)

    @model_validator(mode="before")
    @classmethod
    def _derive_blocks(cls, data):
        if isinstance(data, dict) and "name" in data:
            expected = parse_spec_name(data["name"])
            given = data.get("blocks")
            if given is not None and set(given) != set(expected):
                raise ValueError(f"blocks {tuple(given)} do not match spec name '{data['name']}'")
            data = {**data, "blocks": expected}
        return data

    @property
    def is_naive(self) -> bool:
        return not self.blocks

    def uses(self, block: str) -> bool:
        return block in self.blocks


class ArmCounts(BaseModel):
    exposed: int = 0
    exp_control: int = 0
    necg: int = 0


class DomainArmCounts(ArmCounts):
    domain_id: str
    zero_weight: bool = False


class ArmSummary(BaseModel):
    """Counts n1, n0_exp, n0_necg overall and per domain"""
    total: ArmCounts
    domains: List[DomainArmCounts]
    zero_weight_domains: List[str] = Field(default_factory=list)


class ColumnMap(BaseModel):
    model_config = ConfigDict(extra="forbid")

    user: str = "user_id"
    item: str = "item_id"
    domain: str = "domain_id"
    arm: str = "arm"
    outcome: str = "outcome"
    prior_shares: Optional[str] = "prior_shares"
    same_domain_shares: Optional[str] = "same_domain_shares"
    oracle_affinity: Optional[str] = "oracle_affinity"


class IngestSchema(BaseModel):
    """Mapping from logical fields to file columns"""
    model_config = ConfigDict(extra="forbid")

    columns: ColumnMap = Field(default_factory=ColumnMap)
    features: Optional[Dict[str, str]] = Field(
        None, description="Dense feature name -> column; None detects catalogue names present in the file"
    )

    @field_validator("features")
    @classmethod
    def _known_features(cls, value):
        if value is not None:
            unknown = sorted(set(value) - set(CATALOGUE_BY_NAME))
            if unknown:
                raise ValueError(f"unknown feature names {unknown}")
        return value


class ScalingRecord(BaseModel):
    """Column statistics used to standardize a design; dropped columns had zero variance"""
    columns: List[str]
    means: List[float]
    scales: List[float]
    dropped: List[str] = Field(default_factory=list)


class PropensityFit(BaseModel):
    """Fitted ridge-logit propensity model for one domain"""
    domain_id: Optional[str] = None
    spec_name: Optional[str] = None
    columns: List[str]
    coefficients: List[float]
    intercept: float
    penalty: float
    iterations: int
    converged: bool
    gradient_norm: float
    objective_history: List[float] = Field(default_factory=list)
    scaling: Optional[ScalingRecord] = None


class DomainEstimate(BaseModel):
    domain_id: str
    n_exposed: float
    p0: Optional[float] = None
    weight: float = 0.0
    n_strata: int = 1
    flags: List[str] = Field(default_factory=list)


class EffectEstimate(BaseModel):
    """p0, p1 and the derived relative risk and risk difference"""
    label: str
    p0: float = Field(..., ge=0.0, le=1.0)
    p1: float = Field(..., ge=0.0, le=1.0)
    domains: List[DomainEstimate] = Field(default_factory=list)
    flags: List[str] = Field(default_factory=list)

    @computed_field
    @property
    def rr(self) -> Optional[float]:
        return self.p1 / self.p0 if self.p0 > 0 else None

    @computed_field
    @property
    def delta(self) -> float:
        return self.p1 - self.p0


class SubgroupEstimate(BaseModel):
    """Estimates pooled over one prior-popularity bucket of domains"""
    bucket: int
    n_domains: int
    popularity_low: int
    popularity_high: int
    estimates: List[EffectEstimate] = Field(default_factory=list)
    flags: List[str] = Field(default_factory=list)


class Interval(BaseModel):
    point: Optional[float]
    low: Optional[float] = None
    high: Optional[float] = None
    sd: Optional[float] = None
    n_replicates: int = 0


class BiasRow(BaseModel):
    label: str
    rr: Optional[float]
    rr_abs_diff: Optional[float]
    rr_percent_bias: Optional[float]
    delta: float
    delta_abs_diff: float
    delta_percent_of_max: Optional[float]
    underestimate: bool = False
    bias_reduction: Optional[float] = None
    ci: Dict[str, Interval] = Field(default_factory=dict)


class BiasReport(BaseModel):
    """Observational-vs-experimental discrepancies per spec"""
    experimental_label: str = "exp"
    naive_label: str = "naive"
    rows: List[BiasRow]
    flags: List[str] = Field(default_factory=list)


class BootstrapConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    replicates: int = Field(500, ge=2)
    scheme: Literal["multinomial", "poisson", "iid", "unit"] = "multinomial"
    refit_propensity: bool = True
    z: float = Field(1.959964, gt=0)
    seed: int = Field(0, ge=0, lt=2 ** 64)
    interval: Literal["normal", "percentile"] = "normal"
    variance: Literal["twoway", "product"] = "twoway"
    max_drop_fraction: float = Field(0.1, ge=0.0, le=1.0)
    dump_replicates: bool = False


class SimConfig(BaseModel):
    """Synthetic confounded peer-exposure generator settings"""
    model_config = ConfigDict(extra="forbid")

    n_users: int = Field(2000, ge=1)
    n_domains: int = Field(20, ge=1)
    n_items_per_domain: int = Field(10, ge=1)
    topic_dim: int = Field(4, ge=1)
    homophily: float = Field(1.0, ge=0.0, description="Couples exposure to latent affinity")
    popularity_confounding: float = Field(0.0, ge=0.0, description="Extra homophily per unit of log domain popularity")
    peer_effect: float = Field(3.0, ge=1.0, description="Multiplier on sharing probability when exposed")
    base_exposure_rate: float = Field(0.02, gt=0.0, lt=1.0)
    base_share_rate: float = Field(0.01, gt=0.0, lt=1.0)
    outcome_affinity: float = Field(1.0, ge=0.0, description="Effect of latent affinity on sharing")
    activity_effect: float = Field(0.3, ge=0.0, description="Effect of log user activity on sharing, and on exposure scaled by homophily")
    user_share_sd: float = Field(0.3, ge=0.0)
    item_share_sd: float = Field(0.3, ge=0.0)
    popularity_sd: float = Field(0.8, ge=0.0)
    prior_period_months: float = Field(6.0, gt=0.0)
    activity_window_months: float = Field(1.0, gt=0.0)
    prior_share_rate: float = Field(0.3, gt=0.0, description="Monthly prior shares per domain at unit activity")
    holdout_fraction: float = Field(0.1, gt=0.0, lt=1.0)
    necg_rate: float = Field(0.05, gt=0.0, le=1.0)
    new_domain_fraction: float = Field(0.0, ge=0.0, lt=1.0)
    exposure_link: Literal["logistic", "t"] = "logistic"
    t_link_df: float = Field(3.0, gt=0.0)
    max_capped_fraction: float = Field(0.01, ge=0.0, le=1.0)
    seed: int = Field(0, ge=0, lt=2 ** 64)


class GroundTruth(BaseModel):
    """Exact expected sharing probabilities over the realized exposed pairs"""
    model_config = ConfigDict(extra="ignore")

    true_p0_exposed: float
    true_p1_exposed: float
    n_exposed: int

    @computed_field
    @property
    def true_rr(self) -> float:
        return self.true_p1_exposed / self.true_p0_exposed

    @computed_field
    @property
    def true_delta(self) -> float:
        return self.true_p1_exposed - self.true_p0_exposed


class SimulationRecord(BaseModel):
    """Ground-truth sidecar written next to simulated data"""
    config: SimConfig
    ground_truth: GroundTruth
    arm_counts: Dict[str, ArmCounts]
    capped_fraction: float


class RunConfig(BaseModel):
    """Everything needed to reproduce one estimation run"""
    model_config = ConfigDict(extra="forbid")

    input: Optional[str] = None
    format: Literal["ndjson", "csv"] = "ndjson"
    schema_path: Optional[str] = None
    simulation: Optional[SimConfig] = None
    specs: List[str] = Field(default_factory=lambda: list(TABLE_SPECS))
    penalty: float = Field(0.5, ge=0.0)
    penalty_scale: Literal["total", "per_observation"] = "total"
    standardize: bool = True
    missing_indicators: bool = False
    lambda_sweep: List[float] = Field(default_factory=list)
    strata: StrataPolicy = Field(default_factory=StrataPolicy)
    bootstrap: BootstrapConfig = Field(default_factory=BootstrapConfig)
    subgroup_k: int = Field(5, ge=2)
    subgroups: bool = True
    diagnostics_spec: Optional[str] = None
    grand_naive: bool = False
    save_fits: bool = False
    output_dir: str = "runs/latest"
    threads: int = Field(1, ge=1)
    log_level: str = "INFO"

    @model_validator(mode="after")
    def _check_source(self):
        if (self.input is None) == (self.simulation is None):
            raise ValueError("exactly one of 'input' or 'simulation' must be set")
        for name in self.specs:
            parse_spec_name(name)
        if any(value < 0 for value in self.lambda_sweep):
            raise ValueError("lambda_sweep values must be >= 0")
        return self

    def model_specs(self, penalty: Optional[float] = None) -> List[ModelSpec]:
        return [
            ModelSpec(
                name=name,
                penalty=self.penalty if penalty is None else penalty,
                penalty_scale=self.penalty_scale,
                standardize=self.standardize,
                missing_indicators=self.missing_indicators,
                strata_policy=self.strata,
            )
            for name in self.specs
        ]

    def semantic_dict(self) -> dict:
        """Config fields that affect results; worker count and logging do not"""
        return self.model_dump(mode="json", exclude={"threads", "log_level", "output_dir"})


class Manifest(BaseModel):
    config_hash: str
    seed: int
    package_version: str
    dependency_versions: Dict[str, str]
    run_config: dict
    artifacts: List[str] = Field(default_factory=list)
