# backend/utils/__init__.py
from .errors import (
    PipelineError,
    UsageError,
    DataError,
    NumericalError,
    IngestError,
    MissingFeatureError,
    DegenerateLabelsError,
    DimensionMismatchError,
    MetricInputError,
    BootstrapError
)
from .helpers import (
    format_probability,
    format_ratio,
    format_interval,
    canonical_json,
    config_hash,
    create_error_response,
    sort_rows
)

__all__ = [
    "PipelineError",
    "UsageError",
    "DataError",
    "NumericalError",
    "IngestError",
    "MissingFeatureError",
    "DegenerateLabelsError",
    "DimensionMismatchError",
    "MetricInputError",
    "BootstrapError",
    "format_probability",
    "format_ratio",
    "format_interval",
    "canonical_json",
    "config_hash",
    "create_error_response",
    "sort_rows"
]
