# backend/services/dataset.py
"""
Observation table, per-user covariate store, and file ingestion/validation
"""

import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd

from models.schemas import (
    ARM_LABELS,
    FEATURE_CATALOGUE,
    Arm,
    ArmCounts,
    ArmSummary,
    DomainArmCounts,
    GroundTruth,
    IngestSchema,
    SimulationRecord,
)
from utils.errors import DataError, IngestError

logger = logging.getLogger(__name__)

OBSERVATION_COLUMNS = ["user_id", "item_id", "domain_id", "arm", "outcome"]
ARM_CODES = {Arm.EXPOSED.value: 0, Arm.EXPERIMENTAL_CONTROL.value: 1, Arm.NECG_UNEXPOSED.value: 2}


@dataclass(frozen=True, eq=False)
class UserFeatureStore:
    """
    Raw (untransformed) covariates.

    dense: one row per user (index user_id), catalogue columns; NaN marks a missing value
    prior_shares: user -> {domain: count}, nonzero counts only
    same_domain: explicit (user, domain) -> count, nonzero only; None derives it from prior_shares
    oracle: (user, domain) -> true confounder, simulated data only
    """
    dense: pd.DataFrame
    prior_shares: Dict[str, Dict[str, int]] = field(default_factory=dict)
    has_prior_shares: bool = False
    same_domain: Optional[Dict[Tuple[str, str], int]] = None
    oracle: Optional[Dict[Tuple[str, str], float]] = None

    @property
    def has_same_domain(self) -> bool:
        return self.same_domain is not None or self.has_prior_shares

    @property
    def has_oracle(self) -> bool:
        return self.oracle is not None

    @cached_property
    def domain_vocabulary(self) -> List[str]:
        """Domains with at least one prior share by any user"""
        vocabulary = set()
        for shares in self.prior_shares.values():
            vocabulary.update(shares)
        return sorted(vocabulary)

    def domain_popularity(self) -> Dict[str, int]:
        """Number of unique users with prior shares from each domain"""
        popularity: Dict[str, int] = {}
        for shares in self.prior_shares.values():
            for domain_id in shares:
                popularity[domain_id] = popularity.get(domain_id, 0) + 1
        return popularity

    def same_domain_shares(self, users: Iterable[str], domain_id: str) -> np.ndarray:
        if self.same_domain is not None:
            return np.array([self.same_domain.get((user, domain_id), 0) for user in users], dtype=float)
        return np.array([self.prior_shares.get(user, {}).get(domain_id, 0) for user in users], dtype=float)

    def oracle_values(self, users: Iterable[str], domain_id: str) -> np.ndarray:
        return np.array([self.oracle.get((user, domain_id), 0.0) for user in users], dtype=float)

    def equals(self, other: "UserFeatureStore") -> bool:
        return (
            self.dense.equals(other.dense)
            and list(self.dense.columns) == list(other.dense.columns)
            and self.prior_shares == other.prior_shares
            and self.has_prior_shares == other.has_prior_shares
            and self.same_domain == other.same_domain
            and self.oracle == other.oracle
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    Immutable observation table sorted by domain, so each domain is a contiguous range.

    Outcomes are reachable only through arm-scoped accessors.
    """
    observations: pd.DataFrame
    features: UserFeatureStore
    provenance: Dict[str, Any] = field(default_factory=dict)
    ground_truth: Optional[GroundTruth] = None
    domain_ids: List[str] = field(init=False)
    domain_slices: Dict[str, slice] = field(init=False)
    arm_codes: np.ndarray = field(init=False)
    user_codes: np.ndarray = field(init=False)
    item_codes: np.ndarray = field(init=False)
    n_users: int = field(init=False)
    n_items: int = field(init=False)

    def __post_init__(self):
        frame = self.observations
        domains = frame["domain_id"].to_numpy()
        if len(domains) and np.any(domains[1:] < domains[:-1]):
            raise DataError("observations must be sorted by domain_id; build datasets with Dataset.from_frame")
        domain_ids, starts = np.unique(domains, return_index=True) if len(domains) else (np.array([]), np.array([]))
        stops = list(starts[1:]) + [len(frame)]
        user_uniques, user_codes = np.unique(frame["user_id"].to_numpy(), return_inverse=True)
        item_uniques, item_codes = np.unique(frame["item_id"].to_numpy(), return_inverse=True)
        object.__setattr__(self, "domain_ids", [str(d) for d in domain_ids])
        object.__setattr__(self, "domain_slices", {
            str(d): slice(int(start), int(stop)) for d, start, stop in zip(domain_ids, starts, stops)
        })
        object.__setattr__(self, "arm_codes", frame["arm"].map(ARM_CODES).to_numpy(dtype=np.int8))
        object.__setattr__(self, "user_codes", user_codes.astype(np.int64))
        object.__setattr__(self, "item_codes", item_codes.astype(np.int64))
        object.__setattr__(self, "n_users", len(user_uniques))
        object.__setattr__(self, "n_items", len(item_uniques))

    @classmethod
    def from_frame(
        cls,
        frame: pd.DataFrame,
        features: UserFeatureStore,
        provenance: Optional[Dict[str, Any]] = None,
        ground_truth: Optional[GroundTruth] = None,
    ) -> "Dataset":
        ordered = frame[OBSERVATION_COLUMNS].sort_values("domain_id", kind="stable").reset_index(drop=True)
        return cls(observations=ordered, features=features, provenance=provenance or {}, ground_truth=ground_truth)

    def __len__(self) -> int:
        return len(self.observations)

    def arm_mask(self, arm: Arm, rows: Optional[slice] = None) -> np.ndarray:
        codes = self.arm_codes if rows is None else self.arm_codes[rows]
        return codes == ARM_CODES[arm.value]

    def arm_outcomes(self, arm: Arm, rows: Optional[slice] = None) -> Tuple[np.ndarray, np.ndarray]:
        """
        Outcomes of one arm

        Returns:
            (positions of that arm's rows within `rows`, outcome values)
        """
        mask = self.arm_mask(arm, rows)
        outcomes = self.observations["outcome"].to_numpy()
        if rows is not None:
            outcomes = outcomes[rows]
        positions = np.flatnonzero(mask)
        return positions, outcomes[positions].astype(float)

    def users(self, rows: Optional[slice] = None) -> np.ndarray:
        users = self.observations["user_id"].to_numpy()
        return users if rows is None else users[rows]

    def subset_domains(self, domain_ids: Iterable[str]) -> "Dataset":
        """Dataset restricted to some domains; the feature store is shared"""
        keep = set(domain_ids)
        frame = self.observations[self.observations["domain_id"].isin(keep)]
        return Dataset.from_frame(frame, self.features, {**self.provenance, "subset_of": len(self)}, None)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.observations.equals(other.observations)
            and self.features.equals(other.features)
            and self.ground_truth == other.ground_truth
        )


def validate_arms(dataset: Dataset) -> ArmSummary:
    """Arm counts overall and per domain; domains without exposed pairs are flagged"""
    domains = []
    zero_weight = []
    for domain_id in dataset.domain_ids:
        rows = dataset.domain_slices[domain_id]
        codes = dataset.arm_codes[rows]
        counts = np.bincount(codes, minlength=3)
        entry = DomainArmCounts(
            domain_id=domain_id,
            exposed=int(counts[0]),
            exp_control=int(counts[1]),
            necg=int(counts[2]),
            zero_weight=bool(counts[0] == 0),
        )
        if entry.zero_weight:
            zero_weight.append(domain_id)
            logger.warning(f"Domain {domain_id} has no exposed pairs (zero-weight domain)")
        domains.append(entry)
    totals = np.bincount(dataset.arm_codes, minlength=3)
    return ArmSummary(
        total=ArmCounts(exposed=int(totals[0]), exp_control=int(totals[1]), necg=int(totals[2])),
        domains=domains,
        zero_weight_domains=zero_weight,
    )


def sidecar_path(path: str) -> Path:
    """Ground-truth sidecar location for a data file"""
    data_path = Path(path)
    return data_path.with_name(data_path.stem + ".truth.json")


# Ingestion


def _read_ndjson(path: str) -> pd.DataFrame:
    records = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise IngestError(f"invalid JSON ({e.msg})", row=line_number)
            if not isinstance(record, dict):
                raise IngestError("line is not a JSON object", row=line_number)
            record["__row__"] = line_number
            records.append(record)
    frame = pd.DataFrame.from_records(records) if records else pd.DataFrame({"__row__": []})
    return frame


def _read_csv(path: str) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise IngestError("CSV file has no header row")
    except pd.errors.ParserError as e:
        raise IngestError(f"malformed CSV: {e}")
    frame = frame.mask(frame == "")
    frame["__row__"] = np.arange(1, len(frame) + 1)
    return frame


def _first_bad(frame: pd.DataFrame, mask: np.ndarray) -> int:
    return int(frame["__row__"].to_numpy()[np.flatnonzero(mask)[0]])


def _is_missing(value: Any) -> bool:
    return value is None or (isinstance(value, float) and math.isnan(value))


def _parse_numeric(frame: pd.DataFrame, column: str, label: str, allow_missing: bool) -> np.ndarray:
    raw = frame[column]
    missing = raw.isna().to_numpy()
    if pd.api.types.is_numeric_dtype(raw) and not pd.api.types.is_bool_dtype(raw):
        values = raw.to_numpy(dtype=float)
        bad = np.zeros(len(raw), dtype=bool)
    else:
        # float() per value keeps CSV text round-trip exact
        values = np.full(len(raw), np.nan)
        bad = np.zeros(len(raw), dtype=bool)
        for position, value in enumerate(raw.tolist()):
            if missing[position]:
                continue
            try:
                values[position] = float(value)
            except (TypeError, ValueError):
                bad[position] = True
    if bad.any():
        raise IngestError(f"{label} is not numeric", row=_first_bad(frame, bad))
    if not allow_missing and missing.any():
        raise IngestError(f"{label} is missing", row=_first_bad(frame, missing))
    return values


def _parse_share_map(value: Any, row: int) -> Dict[str, int]:
    if _is_missing(value):
        return {}
    if isinstance(value, str):
        entries = {}
        for part in filter(None, value.split(";")):
            domain_id, sep, count = part.rpartition(":")
            if not sep or not domain_id:
                raise IngestError(f"prior share entry '{part}' is not domain:count", row=row)
            entries[domain_id] = count
        value = entries
    if not isinstance(value, dict):
        raise IngestError("prior shares must be a mapping of domain to count", row=row)
    shares = {}
    for domain_id, count in value.items():
        try:
            number = float(count)
        except (TypeError, ValueError):
            raise IngestError(f"prior share count for '{domain_id}' is not numeric", row=row)
        if number < 0 or number != int(number):
            raise IngestError(f"prior share count for '{domain_id}' must be a nonnegative integer", row=row)
        if number > 0:
            shares[str(domain_id)] = int(number)
    return dict(sorted(shares.items()))


def _check_per_user(frame: pd.DataFrame, user_column: str, columns: List[str]) -> None:
    """Dense features belong to the user, so every row of a user must agree"""
    if not columns:
        return
    encoded = frame[columns].astype(object).where(frame[columns].notna(), "__missing__").astype(str)
    first = encoded.groupby(frame[user_column].to_numpy()).transform("first")
    conflict = (encoded != first).any(axis=1).to_numpy()
    if conflict.any():
        raise IngestError("conflicting feature values for the same user", row=_first_bad(frame, conflict))


def _build_dense(frame: pd.DataFrame, schema: IngestSchema, users: np.ndarray) -> pd.DataFrame:
    if schema.features is None:
        feature_columns = {v.name: v.name for v in FEATURE_CATALOGUE if v.name in frame.columns}
    else:
        feature_columns = dict(schema.features)
        for name, column in feature_columns.items():
            if column not in frame.columns:
                raise IngestError(f"missing feature column '{column}' for '{name}'")
    parsed = pd.DataFrame(index=frame.index)
    for variable in FEATURE_CATALOGUE:
        if variable.name not in feature_columns:
            continue
        column = feature_columns[variable.name]
        if variable.transform == "categorical":
            values = frame[column].astype(object)
            values = values.where(values.notna(), np.nan)
            bad = ~values.isna() & ~values.isin(variable.levels)
            if bad.any():
                raise IngestError(f"unknown {variable.name} level", row=_first_bad(frame, bad.to_numpy()))
            parsed[variable.name] = values
        else:
            values = _parse_numeric(frame, column, variable.name, allow_missing=True)
            if variable.is_count:
                present = ~np.isnan(values)
                negative = present & (values < 0)
                if negative.any():
                    raise IngestError(f"{variable.name} count is negative", row=_first_bad(frame, negative))
                fractional = present & (values != np.floor(np.where(present, values, 0.0)))
                if fractional.any():
                    raise IngestError(f"{variable.name} count is not an integer", row=_first_bad(frame, fractional))
            parsed[variable.name] = values
    feature_names = list(parsed.columns)
    _check_per_user(parsed.assign(__row__=frame["__row__"].to_numpy(), __user__=users), "__user__", feature_names)
    parsed.index = users
    dense = parsed[~parsed.index.duplicated(keep="first")].sort_index()
    dense.index.name = "user_id"
    return dense


def ingest(path: str, format: str = "ndjson", schema: Optional[IngestSchema] = None) -> Dataset:
    """
    Read and validate an observation file

    Args:
        path: NDJSON or CSV file, one observation per row
        format: "ndjson" or "csv"
        schema: column mapping; defaults to the canonical column names

    Returns:
        validated Dataset (with ground truth if a sidecar sits next to the file)
    """
    schema = schema or IngestSchema()
    if not Path(path).exists():
        raise DataError(f"input file not found: {path}")
    if format == "ndjson":
        frame = _read_ndjson(path)
    elif format == "csv":
        frame = _read_csv(path)
    else:
        raise DataError(f"unsupported format '{format}'")

    columns = schema.columns
    for logical in ("user", "item", "domain", "arm", "outcome"):
        column = getattr(columns, logical)
        if column not in frame.columns:
            raise IngestError(f"missing required column '{column}' ({logical})")

    identifiers = {}
    for logical in ("user", "item", "domain"):
        raw = frame[getattr(columns, logical)]
        empty = raw.isna().to_numpy() | (raw.astype(str).str.len() == 0).to_numpy()
        if empty.any():
            raise IngestError(f"empty {logical} identifier", row=_first_bad(frame, empty))
        identifiers[logical] = raw.astype(str).to_numpy(dtype=object)

    arms = frame[columns.arm]
    bad_arm = ~arms.isin(ARM_LABELS).to_numpy()
    if bad_arm.any():
        first = np.flatnonzero(bad_arm)[0]
        raise IngestError(f"unknown arm label '{arms.iloc[first]}'", row=_first_bad(frame, bad_arm))

    outcomes = _parse_numeric(frame, columns.outcome, "outcome", allow_missing=False)
    out_of_range = ~np.isin(outcomes, (0.0, 1.0))
    if out_of_range.any():
        raise IngestError("outcome out of range", row=_first_bad(frame, out_of_range))

    keys = pd.DataFrame({"user": identifiers["user"], "item": identifiers["item"]})
    duplicated = keys.duplicated().to_numpy()
    if duplicated.any():
        raise IngestError("duplicate (user, item) pair", row=_first_bad(frame, duplicated))

    item_domain = pd.Series(identifiers["domain"]).groupby(identifiers["item"]).transform("first").to_numpy()
    inconsistent = item_domain != identifiers["domain"]
    if inconsistent.any():
        raise IngestError("item maps to more than one domain", row=_first_bad(frame, inconsistent))

    observations = pd.DataFrame({
        "user_id": identifiers["user"],
        "item_id": identifiers["item"],
        "domain_id": identifiers["domain"],
        "arm": arms.astype(str).to_numpy(dtype=object),
        "outcome": outcomes.astype(np.int64),
    })

    dense = _build_dense(frame, schema, identifiers["user"])
    rows = frame["__row__"].to_numpy()

    prior_shares: Dict[str, Dict[str, int]] = {}
    has_prior = columns.prior_shares is not None and columns.prior_shares in frame.columns
    if has_prior:
        seen: Dict[str, Dict[str, int]] = {}
        for user, value, row in zip(identifiers["user"], frame[columns.prior_shares].tolist(), rows):
            shares = _parse_share_map(value, int(row))
            if user in seen:
                if seen[user] != shares:
                    raise IngestError("conflicting prior shares for the same user", row=int(row))
            else:
                seen[user] = shares
        prior_shares = {user: shares for user, shares in sorted(seen.items()) if shares}

    same_domain = None
    if columns.same_domain_shares is not None and columns.same_domain_shares in frame.columns:
        counts = _parse_numeric(frame, columns.same_domain_shares, "same_domain_shares", allow_missing=False)
        bad = (counts < 0) | (counts != np.floor(counts))
        if bad.any():
            raise IngestError("same_domain_shares must be a nonnegative integer", row=_first_bad(frame, bad))
        seen_pairs: Dict[Tuple[str, str], int] = {}
        for user, domain_id, count, row in zip(identifiers["user"], identifiers["domain"], counts, rows):
            key = (user, domain_id)
            if seen_pairs.setdefault(key, int(count)) != int(count):
                raise IngestError("conflicting same-domain shares for the same user and domain", row=int(row))
        same_domain = {key: count for key, count in seen_pairs.items() if count > 0}

    oracle = None
    if columns.oracle_affinity is not None and columns.oracle_affinity in frame.columns:
        values = _parse_numeric(frame, columns.oracle_affinity, "oracle_affinity", allow_missing=False)
        oracle = {
            (user, domain_id): float(value)
            for user, domain_id, value in zip(identifiers["user"], identifiers["domain"], values)
        }

    features = UserFeatureStore(
        dense=dense,
        prior_shares=prior_shares,
        has_prior_shares=has_prior,
        same_domain=same_domain,
        oracle=oracle,
    )

    ground_truth = None
    sidecar = sidecar_path(path)
    if sidecar.exists():
        record = SimulationRecord.model_validate_json(sidecar.read_text(encoding="utf-8"))
        ground_truth = record.ground_truth
        logger.info(f"Loaded ground truth from {sidecar}")

    dataset = Dataset.from_frame(observations, features, {"source": str(path), "format": format}, ground_truth)
    summary = validate_arms(dataset)
    logger.info(
        f"Ingested {len(dataset)} observations from {path}: "
        f"exposed={summary.total.exposed} exp_control={summary.total.exp_control} necg={summary.total.necg}"
    )
    for entry in summary.domains:
        logger.debug(f"  domain {entry.domain_id}: exposed={entry.exposed} exp_control={entry.exp_control} necg={entry.necg}")
    return dataset


# Emission


def _row_records(dataset: Dataset) -> List[Dict[str, Any]]:
    features = dataset.features
    dense = features.dense
    dense_rows = {
        user: {name: (None if _is_missing(value) else value) for name, value in row.items()}
        for user, row in zip(dense.index, dense.to_dict(orient="records"))
    }
    records = []
    for user, item, domain_id, arm, outcome in dataset.observations.itertuples(index=False, name=None):
        record = {"user_id": user, "item_id": item, "domain_id": domain_id, "arm": arm, "outcome": int(outcome)}
        record.update(dense_rows.get(user, {}))
        if features.has_prior_shares:
            record["prior_shares"] = features.prior_shares.get(user, {})
        if features.same_domain is not None:
            record["same_domain_shares"] = features.same_domain.get((user, domain_id), 0)
        if features.oracle is not None:
            record["oracle_affinity"] = features.oracle[(user, domain_id)]
        records.append(record)
    return records


def write_observations(dataset: Dataset, path: str, format: str = "ndjson") -> Path:
    """Write a dataset in the layout `ingest` reads with the default schema"""
    if format not in ("ndjson", "csv"):
        raise DataError(f"unsupported format '{format}'")
    target = Path(path)
    records = _row_records(dataset)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        if format == "ndjson":
            with open(target, "w", encoding="utf-8") as handle:
                for record in records:
                    handle.write(json.dumps(record, sort_keys=False) + "\n")
        else:
            for record in records:
                if "prior_shares" in record:
                    record["prior_shares"] = ";".join(f"{d}:{c}" for d, c in record["prior_shares"].items())
            columns = list(records[0]) if records else OBSERVATION_COLUMNS
            pd.DataFrame.from_records(records, columns=columns).to_csv(target, index=False)
    except OSError as e:
        logger.error(f"Observation write error for {target}: {e}")
        raise DataError(f"cannot write observations to {target}: {e}")
    logger.info(f"Wrote {len(records)} observations to {target}")
    return target
