# backend/utils/errors.py
from typing import Any, Optional


class PipelineError(Exception):
    """Base error carrying the process exit code and a detail payload"""

    exit_code = 1

    def __init__(self, detail: str, **context: Any):
        super().__init__(detail)
        self.detail = detail
        self.context = context

    def to_dict(self) -> dict:
        payload = {"type": type(self).__name__, "detail": self.detail, "exit_code": self.exit_code}
        if self.context:
            payload["context"] = self.context
        return payload


class UsageError(PipelineError):
    """Bad flags, bad config keys, mismatched manifests"""

    exit_code = 1


class DataError(PipelineError):
    """Input data violates an invariant or lacks what a request needs"""

    exit_code = 2


class NumericalError(PipelineError):
    """Solver or estimator could not produce a finite answer"""

    exit_code = 3


class IngestError(DataError):
    """Malformed input row; row is 1-based within the data rows"""

    def __init__(self, detail: str, row: Optional[int] = None, **context: Any):
        message = f"row {row}: {detail}" if row is not None else detail
        super().__init__(message, row=row, **context)
        self.row = row


class MissingFeatureError(DataError):
    pass


class DegenerateLabelsError(NumericalError):
    """All exposure labels carry the same value"""

    pass


class DimensionMismatchError(UsageError):
    pass


class MetricInputError(NumericalError):
    pass


class BootstrapError(NumericalError):
    pass
