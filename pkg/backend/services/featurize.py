# backend/services/featurize.py
"""
Per-domain sparse design matrices built from a ModelSpec
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from models.schemas import FEATURE_CATALOGUE, Arm, ModelSpec, RawVariable, ScalingRecord
from services.dataset import Dataset
from utils.errors import DataError, DimensionMismatchError, MissingFeatureError

logger = logging.getLogger(__name__)

# Relative variance below which a column counts as constant
ZERO_VARIANCE_TOLERANCE = 1e-10


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """
    Rows are the domain's exposed and NECG pairs (never experimental controls).

    The effective matrix is `matrix - center` (center broadcast over rows); the
    centering stays implicit so sparse storage survives standardization.
    """
    matrix: sp.csr_matrix
    columns: List[str]
    rows: np.ndarray
    labels: np.ndarray
    domain_id: str
    center: Optional[np.ndarray] = None

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_columns(self) -> int:
        return self.matrix.shape[1]

    @property
    def column_index(self) -> Dict[str, int]:
        return {name: position for position, name in enumerate(self.columns)}

    def matvec(self, beta: np.ndarray) -> np.ndarray:
        product = self.matrix @ beta
        if self.center is not None:
            product = product - float(self.center @ beta)
        return np.asarray(product, dtype=float).ravel()

    def rmatvec(self, residual: np.ndarray) -> np.ndarray:
        product = np.asarray(self.matrix.T @ residual, dtype=float).ravel()
        if self.center is not None:
            product = product - self.center * float(residual.sum())
        return product

    def to_dense(self) -> np.ndarray:
        dense = self.matrix.toarray()
        if self.center is not None:
            dense = dense - self.center[np.newaxis, :]
        return dense

    def take_rows(self, order: np.ndarray) -> "DesignMatrix":
        return replace(self, matrix=self.matrix[order], rows=self.rows[order], labels=self.labels[order])


def _dense_columns(variable: RawVariable, values: np.ndarray) -> List[Tuple[str, np.ndarray]]:
    name = variable.name
    if variable.transform == "poly2":
        return [(name, values), (f"{name}^2", values ** 2)]
    if variable.transform == "log1p":
        return [(f"log1p({name})", np.log1p(values))]
    if variable.transform == "log1p_indicator":
        return [(f"log1p({name})", np.log1p(values)), (f"1{{{name}>0}}", (values > 0).astype(float))]
    return [(name, values)]


def _categorical_columns(variable: RawVariable, values: np.ndarray) -> List[Tuple[str, np.ndarray]]:
    # k levels -> k-1 indicators; missing falls into the reference level
    return [
        (f"{variable.name}={level}", (values == level).astype(float))
        for level in variable.levels
        if level != variable.reference_level
    ]


def _block_variables(spec: ModelSpec) -> List[RawVariable]:
    return [v for v in FEATURE_CATALOGUE if any(block in v.blocks for block in spec.blocks)]


def _other_domain_block(dataset: Dataset, users: np.ndarray, domain_id: str) -> Tuple[sp.csr_matrix, List[str]]:
    vocabulary = [d for d in dataset.features.domain_vocabulary if d != domain_id]
    position = {d: j for j, d in enumerate(vocabulary)}
    per_user: Dict[str, Tuple[List[int], List[float]]] = {}
    indptr = [0]
    indices: List[int] = []
    data: List[float] = []
    for user in users:
        entry = per_user.get(user)
        if entry is None:
            shares = dataset.features.prior_shares.get(user, {})
            pairs = sorted((position[d], np.log1p(c)) for d, c in shares.items() if d in position)
            entry = ([j for j, _ in pairs], [float(v) for _, v in pairs])
            per_user[user] = entry
        indices.extend(entry[0])
        data.extend(entry[1])
        indptr.append(len(indices))
    matrix = sp.csr_matrix(
        (np.asarray(data, dtype=float), np.asarray(indices, dtype=np.int64), np.asarray(indptr, dtype=np.int64)),
        shape=(len(users), len(vocabulary)),
    )
    return matrix, [f"other_shares[{d}]" for d in vocabulary]


def design_rows(dataset: Dataset, domain_id: str) -> Tuple[np.ndarray, np.ndarray]:
    """Absolute row positions of the domain's exposed and NECG pairs, and exposure labels"""
    if domain_id not in dataset.domain_slices:
        raise DataError(f"empty domain {domain_id}")
    rows = dataset.domain_slices[domain_id]
    exposed = dataset.arm_mask(Arm.EXPOSED, rows)
    necg = dataset.arm_mask(Arm.NECG_UNEXPOSED, rows)
    keep = np.flatnonzero(exposed | necg)
    return rows.start + keep, exposed[keep].astype(float)


def build_design(dataset: Dataset, domain_id: str, spec: ModelSpec) -> DesignMatrix:
    """
    Transformed covariates for one domain

    Args:
        dataset: source observations and feature store
        domain_id: domain whose exposed and NECG pairs form the rows
        spec: covariate blocks to include

    Returns:
        DesignMatrix with sparse storage and a column dictionary
    """
    if spec.is_naive:
        raise DataError("the naive spec has no covariate blocks")
    rows, labels = design_rows(dataset, domain_id)
    if len(rows) == 0:
        raise DataError(f"empty domain {domain_id}")
    features = dataset.features
    users = dataset.users()[rows]

    names: List[str] = []
    dense_parts: List[np.ndarray] = []
    variables = _block_variables(spec)
    if variables:
        dense = features.dense.reindex(users)
        for variable in variables:
            if variable.name not in dense.columns:
                logger.warning(f"Feature '{variable.name}' absent from the feature store; using zeros")
                raw = np.full(len(users), np.nan) if variable.transform != "categorical" else np.full(len(users), None)
            else:
                raw = dense[variable.name].to_numpy()
            if variable.transform == "categorical":
                values = np.asarray(raw, dtype=object)
                missing = np.array([v is None or v != v for v in values], dtype=bool)
                columns = _categorical_columns(variable, values)
            else:
                values = np.asarray(raw, dtype=float)
                missing = np.isnan(values)
                columns = _dense_columns(variable, np.where(missing, 0.0, values))
            for name, column in columns:
                names.append(name)
                dense_parts.append(column)
            if spec.missing_indicators:
                names.append(f"missing({variable.name})")
                dense_parts.append(missing.astype(float))

    if spec.uses("s"):
        if not features.has_same_domain:
            raise MissingFeatureError("spec requires same-domain prior shares")
        same = features.same_domain_shares(users, domain_id)
        names.extend(["log1p(same_domain_shares)", "1{same_domain_shares>0}"])
        dense_parts.extend([np.log1p(same), (same > 0).astype(float)])

    if spec.uses("O"):
        if not features.has_oracle:
            raise MissingFeatureError("spec requires the oracle confounder")
        names.append("oracle_affinity")
        dense_parts.append(features.oracle_values(users, domain_id))

    blocks = []
    if dense_parts:
        blocks.append(sp.csr_matrix(np.column_stack(dense_parts)))
    if spec.uses("M"):
        if not features.has_prior_shares:
            raise MissingFeatureError("spec requires prior shares by domain")
        other, other_names = _other_domain_block(dataset, users, domain_id)
        blocks.append(other)
        names.extend(other_names)

    if blocks:
        matrix = sp.hstack(blocks, format="csr")
    else:
        matrix = sp.csr_matrix((len(rows), 0))
    matrix.sum_duplicates()
    return DesignMatrix(matrix=matrix.tocsr(), columns=names, rows=rows, labels=labels, domain_id=domain_id)


def standardize(design: DesignMatrix) -> Tuple[DesignMatrix, ScalingRecord]:
    """Center and scale each column over the design rows; constant columns are dropped"""
    n = design.n_rows
    matrix = design.matrix
    raw_mean = np.asarray(matrix.sum(axis=0), dtype=float).ravel() / n
    raw_square = np.asarray(matrix.multiply(matrix).sum(axis=0), dtype=float).ravel() / n
    variance = np.maximum(raw_square - raw_mean ** 2, 0.0)
    keep = variance > ZERO_VARIANCE_TOLERANCE * np.maximum(raw_square, np.finfo(float).tiny)
    scale = np.sqrt(variance[keep])
    kept = [name for name, flag in zip(design.columns, keep) if flag]
    dropped = [name for name, flag in zip(design.columns, keep) if not flag]
    if dropped:
        logger.debug(f"Domain {design.domain_id}: dropped {len(dropped)} constant columns")
    scaled = (matrix[:, np.flatnonzero(keep)] @ sp.diags(1.0 / scale)).tocsr() if len(kept) else sp.csr_matrix((n, 0))
    record = ScalingRecord(
        columns=kept,
        means=raw_mean[keep].tolist(),
        scales=scale.tolist(),
        dropped=dropped,
    )
    standardized = replace(design, matrix=scaled, columns=kept, center=raw_mean[keep] / scale)
    return standardized, record


def apply_scaling(design: DesignMatrix, record: ScalingRecord) -> DesignMatrix:
    """Re-apply a stored ScalingRecord to a freshly built (unscaled) design"""
    if design.center is not None:
        raise DimensionMismatchError("design is already standardized")
    index = design.column_index
    missing = [name for name in record.columns if name not in index]
    if missing:
        raise DimensionMismatchError(f"design lacks {len(missing)} scaled columns, e.g. '{missing[0]}'")
    positions = np.array([index[name] for name in record.columns], dtype=np.int64)
    scale = np.asarray(record.scales, dtype=float)
    means = np.asarray(record.means, dtype=float)
    if len(positions):
        scaled = (design.matrix[:, positions] @ sp.diags(1.0 / scale)).tocsr()
    else:
        scaled = sp.csr_matrix((design.n_rows, 0))
    return replace(design, matrix=scaled, columns=list(record.columns), center=means / scale)
