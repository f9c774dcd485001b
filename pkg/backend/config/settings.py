# backend/config/settings.py
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, Optional, Type, TypeVar

from dotenv import load_dotenv
from pydantic import BaseModel, ValidationError

from models.schemas import IngestSchema, RunConfig, SimConfig
from utils.errors import UsageError

# Load environment variables
load_dotenv()

ModelT = TypeVar("ModelT", bound=BaseModel)


class Settings:
    """Process-level defaults; none of these change estimates"""

    # Logging Configuration
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()
    LOG_FORMAT = os.getenv("LOG_FORMAT", "[%(asctime)s] %(levelname)s %(name)s: %(message)s")

    # Output Configuration
    OUTPUT_DIR = os.getenv("PEERSTRAT_OUTPUT_DIR", "runs/latest")

    # Worker pool size
    THREADS = int(os.getenv("PEERSTRAT_THREADS", 1))

    PACKAGE_VERSION = "1.0.0"

    @classmethod
    def get_logging_config(cls, level: Optional[str] = None) -> Dict[str, Any]:
        """Get keyword arguments for logging.basicConfig"""
        return {
            "level": (level or cls.LOG_LEVEL).upper(),
            "format": cls.LOG_FORMAT,
            "datefmt": "%Y-%m-%d %H:%M:%S",
        }


def _describe_validation_error(error: ValidationError, source: str) -> str:
    problems = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "<root>"
        if item["type"] == "extra_forbidden":
            problems.append(f"unknown config key '{location}'")
        else:
            problems.append(f"{location}: {item['msg']}")
    return f"invalid configuration in {source}: " + "; ".join(problems)


def read_toml(path: str) -> Dict[str, Any]:
    """Read a TOML file, turning I/O and syntax problems into usage errors"""
    try:
        with open(path, "rb") as handle:
            return tomllib.load(handle)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as e:
        raise UsageError(f"config file {path} is not valid TOML: {e}")


def validate_config(model: Type[ModelT], data: Dict[str, Any], source: str = "config") -> ModelT:
    try:
        return model.model_validate(data)
    except ValidationError as e:
        raise UsageError(_describe_validation_error(e, source))


def load_sim_config(path: str) -> SimConfig:
    """SimConfig from a TOML file; a top-level [simulation] table is accepted too"""
    data = read_toml(path)
    if set(data) == {"simulation"}:
        data = data["simulation"]
    return validate_config(SimConfig, data, path)


def load_schema(path: Optional[str]) -> IngestSchema:
    if path is None:
        return IngestSchema()
    return validate_config(IngestSchema, read_toml(path), path)


def load_run_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Build a RunConfig from flag values overridden by a TOML file

    Args:
        path: optional TOML file; its keys win over the flag values
        overrides: values gathered from command-line flags

    Returns:
        validated RunConfig
    """
    data: Dict[str, Any] = {key: value for key, value in (overrides or {}).items() if value is not None}
    source = "command-line flags"
    if path is not None:
        file_data = read_toml(path)
        base_dir = Path(path).parent
        for key in ("input", "schema_path"):
            if key in file_data and not Path(file_data[key]).is_absolute():
                file_data[key] = str(base_dir / file_data[key])
        if "simulation" in file_data:
            data.pop("input", None)
        if "input" in file_data:
            data.pop("simulation", None)
        for key, value in file_data.items():
            if isinstance(value, dict) and isinstance(data.get(key), dict):
                data[key] = {**data[key], **value}
            else:
                data[key] = value
        source = path
    return validate_config(RunConfig, data, source)


# Create global settings instance
settings = Settings()
