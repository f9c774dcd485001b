# backend/models/__init__.py
from .schemas import (
    Arm,
    ARM_LABELS,
    BLOCKS,
    MODEL_BLOCKS,
    TABLE_SPECS,
    RawVariable,
    FEATURE_CATALOGUE,
    CATALOGUE_BY_NAME,
    parse_spec_name,
    StrataPolicy,
    ModelSpec,
    ArmCounts,
    DomainArmCounts,
    ArmSummary,
    ColumnMap,
    IngestSchema,
    ScalingRecord,
    PropensityFit,
    DomainEstimate,
    EffectEstimate,
    SubgroupEstimate,
    Interval,
    BiasRow,
    BiasReport,
    BootstrapConfig,
    SimConfig,
    GroundTruth,
    SimulationRecord,
    RunConfig,
    Manifest
)

__all__ = [
    "Arm",
    "ARM_LABELS",
    "BLOCKS",
    "MODEL_BLOCKS",
    "TABLE_SPECS",
    "RawVariable",
    "FEATURE_CATALOGUE",
    "CATALOGUE_BY_NAME",
    "parse_spec_name",
    "StrataPolicy",
    "ModelSpec",
    "ArmCounts",
    "DomainArmCounts",
    "ArmSummary",
    "ColumnMap",
    "IngestSchema",
    "ScalingRecord",
    "PropensityFit",
    "DomainEstimate",
    "EffectEstimate",
    "SubgroupEstimate",
    "Interval",
    "BiasRow",
    "BiasReport",
    "BootstrapConfig",
    "SimConfig",
    "GroundTruth",
    "SimulationRecord",
    "RunConfig",
    "Manifest"
]
