# backend/utils/helpers.py
import hashlib
import json
import math
from typing import Any, Dict, List, Optional


def format_probability(value: Optional[float], digits: int = 4) -> str:
    """Format a probability at a fixed number of significant figures"""
    if value is None or not math.isfinite(value):
        return "N/A"
    return f"{value:.{digits - 1}e}"


def format_ratio(value: Optional[float], digits: int = 4) -> str:
    """Format a ratio or percentage at a fixed number of significant figures"""
    if value is None or not math.isfinite(value):
        return "N/A"
    return f"{value:.{digits}g}"


def format_interval(low: Optional[float], high: Optional[float], formatter=format_ratio) -> str:
    if low is None or high is None:
        return ""
    return f"[{formatter(low)}, {formatter(high)}]"


def canonical_json(data: Any) -> str:
    """Serialize with sorted keys and no whitespace so hashes are stable"""
    return json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)


def config_hash(data: Any) -> str:
    """SHA-256 of the canonical JSON form of a configuration"""
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()


def create_error_response(error: Exception) -> Dict[str, Any]:
    """Create standardized error payload for stderr"""
    detail = error.to_dict() if hasattr(error, "to_dict") else {"type": type(error).__name__, "detail": str(error)}
    return {"error": True, **detail}


def sort_rows(rows: List[Dict[str, Any]], key: str, absolute: bool = True) -> List[Dict[str, Any]]:
    """Sort report rows by a numeric key; rows missing the key go last"""

    def _key(row):
        value = row.get(key)
        if value is None or (isinstance(value, float) and not math.isfinite(value)):
            return (1, 0.0)
        return (0, abs(value) if absolute else value)

    return sorted(rows, key=_key)
