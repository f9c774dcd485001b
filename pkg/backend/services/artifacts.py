# backend/services/artifacts.py
"""
JSON/CSV run artifacts and the reproducibility manifest
"""

import json
import logging
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd
import pydantic
import scipy
from pydantic import BaseModel

from config.settings import settings
from models.schemas import Manifest, RunConfig
from utils.errors import DataError
from utils.helpers import config_hash

logger = logging.getLogger(__name__)

ESTIMATES_JSON = "estimates.json"
ESTIMATES_CSV = "estimates.csv"
BIAS_JSON = "bias_report.json"
BIAS_CSV = "bias_report.csv"
DOMAINS_CSV = "domains.csv"
STRATA_CSV = "strata.csv"
SUBGROUPS_JSON = "subgroups.json"
SUBGROUPS_CSV = "subgroups.csv"
SWEEP_CSV = "penalty_sweep.csv"
REPLICATES_CSV = "replicates.csv"
FITS_DIR = "fits"
MANIFEST_JSON = "manifest.json"


def dependency_versions() -> Dict[str, str]:
    return {
        "numpy": np.__version__,
        "pandas": pd.__version__,
        "pydantic": pydantic.VERSION,
        "scipy": scipy.__version__,
    }


def fit_artifact_name(spec_name: str, penalty: float) -> str:
    return f"{FITS_DIR}/{spec_name}__lambda={penalty:g}.json"


class ArtifactStore:
    """Artifact directory; every file is written to a temporary name and renamed into place"""

    def __init__(self, output_dir: str):
        self.root = Path(output_dir)
        self.written: List[str] = []

    def path(self, name: str) -> Path:
        return self.root / name

    @contextmanager
    def open_artifact(self, name: str):
        """Text handle for a new artifact; the file only appears if the block succeeds"""
        target = self.path(name)
        temporary = target.with_name(target.name + ".tmp")
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            handle = open(temporary, "w", encoding="utf-8", newline="")
        except OSError as e:
            logger.error(f"Artifact write error for {target}: {e}")
            raise DataError(f"cannot write artifact {target}: {e}")
        try:
            yield handle
        except Exception:
            handle.close()
            temporary.unlink(missing_ok=True)
            raise
        handle.close()
        try:
            os.replace(temporary, target)
        except OSError as e:
            logger.error(f"Artifact write error for {target}: {e}")
            raise DataError(f"cannot write artifact {target}: {e}")
        if name not in self.written:
            self.written.append(name)
        logger.debug(f"Wrote {target}")

    def write_json(self, name: str, payload: Any) -> Path:
        if isinstance(payload, BaseModel):
            payload = payload.model_dump(mode="json")
        with self.open_artifact(name) as handle:
            handle.write(json.dumps(payload, indent=2, allow_nan=False) + "\n")
        return self.path(name)

    def write_csv(self, name: str, rows: Sequence[Dict[str, Any]], columns: Sequence[str]) -> Path:
        return self.write_frame(name, pd.DataFrame(list(rows), columns=list(columns)))

    def write_frame(self, name: str, frame: pd.DataFrame) -> Path:
        with self.open_artifact(name) as handle:
            frame.to_csv(handle, index=False, lineterminator="\n")
        return self.path(name)

    def write_text(self, name: str, text: str) -> Path:
        with self.open_artifact(name) as handle:
            handle.write(text)
        return self.path(name)

    def write_manifest(self, run_config: RunConfig, extra_artifacts: Iterable[str] = ()) -> Manifest:
        """Manifest without timestamps, listing every artifact written so far"""
        semantic = run_config.semantic_dict()
        manifest = Manifest(
            config_hash=config_hash(semantic),
            seed=run_config.bootstrap.seed,
            package_version=settings.PACKAGE_VERSION,
            dependency_versions=dependency_versions(),
            run_config=semantic,
            artifacts=sorted(set(self.written) | set(extra_artifacts)),
        )
        self.write_json(MANIFEST_JSON, manifest)
        return manifest

    def require(self, names: Iterable[str]) -> None:
        missing = [name for name in names if not self.path(name).exists()]
        if missing:
            raise DataError(f"missing artifacts in {self.root}: {', '.join(missing)}")

    def read_json(self, name: str) -> Any:
        self.require([name])
        with open(self.path(name), "r", encoding="utf-8") as handle:
            return json.load(handle)

    def read_manifest(self) -> Manifest:
        return Manifest.model_validate(self.read_json(MANIFEST_JSON))

    def read_csv(self, name: str) -> pd.DataFrame:
        self.require([name])
        return pd.read_csv(self.path(name), float_precision="round_trip")

    def has(self, name: str) -> bool:
        return self.path(name).exists()


def open_store(output_dir: Optional[str] = None) -> ArtifactStore:
    return ArtifactStore(output_dir or settings.OUTPUT_DIR)
