"""Mixed-type variable schema, cohort containers and the reversible encoding
between raw patient records and the real-valued network representation.

Raw records hold one float per variable per month. Numeric variables hold
their measured value; binary and categorical variables hold the integer index
of their level. The encoded representation replaces each non-numeric value by
a one-hot (or, for network outputs, a soft simplex) block and scales numeric
channels into [0, 1].
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

NUMERIC = "numeric"
BINARY = "binary"
CATEGORICAL = "categorical"
KINDS = (NUMERIC, BINARY, CATEGORICAL)
TRANSFORMS = ("none", "log", "log1p")
DEFAULT_EMBED_DIM = {BINARY: 2, CATEGORICAL: 4}

MIN_LENGTH = 10
MAX_LENGTH = 100


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class VariableSpec:
    name: str
    kind: str
    unit: str | None = None
    levels: tuple[str, ...] = ()
    embed_dim: int | None = None
    # applied before min-max scaling; numeric only
    transform: str = "none"
    # constant within a patient record (demographics)
    static: bool = False

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        if self.embed_dim is None and self.kind in DEFAULT_EMBED_DIM:
            object.__setattr__(self, "embed_dim", DEFAULT_EMBED_DIM[self.kind])

    @property
    def is_numeric(self) -> bool:
        return self.kind == NUMERIC

    @property
    def onehot_width(self) -> int:
        return 1 if self.is_numeric else len(self.levels)

    @property
    def embed_width(self) -> int:
        return 1 if self.is_numeric else int(self.embed_dim)

    def level_index(self, level: str) -> int:
        try:
            return self.levels.index(level)
        except ValueError:
            raise SchemaError(f"unknown level {level!r} for variable {self.name!r}") from None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "unit": self.unit,
            "levels": list(self.levels),
            "embed_dim": self.embed_dim,
            "transform": self.transform,
            "static": self.static,
        }


@dataclass(frozen=True)
class VariableSchema:
    variables: tuple[VariableSpec, ...]
    quasi_identifiers: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "quasi_identifiers", tuple(self.quasi_identifiers))

    def __len__(self) -> int:
        return len(self.variables)

    def __iter__(self):
        return iter(self.variables)

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.variables]

    def index(self, name: str) -> int:
        for i, v in enumerate(self.variables):
            if v.name == name:
                return i
        raise KeyError(name)

    def __getitem__(self, name: str) -> VariableSpec:
        return self.variables[self.index(name)]

    @property
    def numeric(self) -> list[VariableSpec]:
        return [v for v in self.variables if v.is_numeric]

    @property
    def nonnumeric(self) -> list[VariableSpec]:
        return [v for v in self.variables if not v.is_numeric]

    @property
    def encoded_width(self) -> int:
        """Width of the one-hot representation consumed and emitted by the networks."""
        return sum(v.onehot_width for v in self.variables)

    @property
    def embed_width(self) -> int:
        """Width after soft-embedding: #numeric + sum of embedding dims."""
        return sum(v.embed_width for v in self.variables)

    def layout(self) -> list[tuple[VariableSpec, slice]]:
        """Channel slice of every variable inside the encoded representation."""
        out, start = [], 0
        for v in self.variables:
            out.append((v, slice(start, start + v.onehot_width)))
            start += v.onehot_width
        return out

    def to_dict(self) -> dict:
        return {
            "variables": [v.to_dict() for v in self.variables],
            "quasi_identifiers": list(self.quasi_identifiers),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VariableSchema":
        variables = [VariableSpec(**{**v, "levels": tuple(v.get("levels", ()))}) for v in d["variables"]]
        return cls(tuple(variables), tuple(d.get("quasi_identifiers", ())))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def validate_schema(schema: VariableSchema) -> list[str]:
    """Every invariant breach as ``"<variable>: <reason>"``; empty means usable."""
    problems = []
    seen = set()
    for v in schema.variables:
        if v.name in seen:
            problems.append(f"{v.name}: duplicate name")
        seen.add(v.name)
        if v.kind not in KINDS:
            problems.append(f"{v.name}: unknown kind {v.kind!r}")
            continue
        if v.is_numeric:
            if v.levels:
                problems.append(f"{v.name}: numeric variable has levels")
            if v.transform not in TRANSFORMS:
                problems.append(f"{v.name}: unknown transform {v.transform!r}")
            if v.static:
                problems.append(f"{v.name}: static numeric variables are not supported")
            continue
        if not v.levels:
            problems.append(f"{v.name}: levels empty")
        elif len(set(v.levels)) != len(v.levels):
            problems.append(f"{v.name}: levels not unique")
        if v.kind == BINARY and v.levels and len(v.levels) != 2:
            problems.append(f"{v.name}: binary variable needs exactly 2 levels")
        if v.embed_dim is None or int(v.embed_dim) < 1:
            problems.append(f"{v.name}: embed_dim must be a positive integer")
        if v.transform != "none":
            problems.append(f"{v.name}: transform only applies to numeric variables")
    by_name = {v.name: v for v in schema.variables}
    for q in schema.quasi_identifiers:
        if q not in by_name:
            problems.append(f"{q}: quasi-identifier is not a schema variable")
        elif by_name[q].is_numeric:
            problems.append(f"{q}: quasi-identifier must be non-numeric")
    return problems


def hiv_schema() -> VariableSchema:
    """The 13-variable ART-for-HIV layout (3 numeric, 5 binary, 5 categorical)."""
    tf = ("False", "True")
    return VariableSchema(
        variables=(
            VariableSpec("VL", NUMERIC, unit="copies/mL", transform="log1p"),
            VariableSpec("CD4", NUMERIC, unit="cells/uL", transform="log1p"),
            VariableSpec("Rel CD4", NUMERIC, unit="cells/uL", transform="log1p"),
            VariableSpec("Gender", BINARY, levels=("Male", "Female"), static=True),
            VariableSpec("Ethnic", CATEGORICAL, levels=("Asian", "African", "Caucasian", "Other"), static=True),
            VariableSpec(
                "Base Drug Combo",
                CATEGORICAL,
                levels=("FTC + TDF", "3TC + ABC", "FTC + TAF", "DRV + FTC + TDF", "FTC + RTVB + TDF", "Other"),
            ),
            VariableSpec("Comp. INI", CATEGORICAL, levels=("DTG", "RAL", "EVG", "Not Applied")),
            VariableSpec("Comp. NNRTI", CATEGORICAL, levels=("NVP", "EFV", "RPV", "Not Applied")),
            VariableSpec("Extra PI", CATEGORICAL, levels=("DRV", "RTVB", "LPV", "RTV", "ATV", "Not Applied")),
            VariableSpec("Extra pk-En", BINARY, levels=tf),
            VariableSpec("VL (M)", BINARY, levels=tf),
            VariableSpec("CD4 (M)", BINARY, levels=tf),
            VariableSpec("Drug (M)", BINARY, levels=tf),
        ),
        quasi_identifiers=("Gender", "Ethnic"),
    )


# ---------------------------------------------------------------------------
# records


@dataclass
class PatientRecord:
    patient_id: str
    values: np.ndarray  # [length, n_variables]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise SchemaError(f"record {self.patient_id}: values must be 2-D")

    @property
    def length(self) -> int:
        return self.values.shape[0]


def check_record(record: PatientRecord, schema: VariableSchema, *, strict_length: bool = True) -> list[str]:
    problems = []
    n = record.length
    if record.values.shape[1] != len(schema):
        return [f"{record.patient_id}: expected {len(schema)} columns, got {record.values.shape[1]}"]
    if strict_length and (n % 10 or not MIN_LENGTH <= n <= MAX_LENGTH):
        problems.append(f"{record.patient_id}: length {n} is not a multiple of 10 in [10, 100]")
    for j, v in enumerate(schema.variables):
        col = record.values[:, j]
        if not np.all(np.isfinite(col)):
            problems.append(f"{record.patient_id}/{v.name}: non-finite values")
            continue
        if v.is_numeric:
            if v.transform != "none" and np.any(col < 0):
                problems.append(f"{record.patient_id}/{v.name}: negative values")
        else:
            if np.any(col != np.round(col)) or np.any(col < 0) or np.any(col >= len(v.levels)):
                problems.append(f"{record.patient_id}/{v.name}: level index out of range")
            elif v.static and np.any(col != col[0]):
                problems.append(f"{record.patient_id}/{v.name}: static variable varies within record")
    return problems


@dataclass
class Cohort:
    schema: VariableSchema
    records: list[PatientRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def lengths(self) -> np.ndarray:
        return np.array([r.length for r in self.records], dtype=np.int64)

    @property
    def n_rows(self) -> int:
        return int(self.lengths.sum()) if self.records else 0

    def rows(self) -> np.ndarray:
        """All months of all records stacked: [n_rows, n_variables]."""
        if not self.records:
            return np.zeros((0, len(self.schema)))
        return np.concatenate([r.values for r in self.records], axis=0)

    def column(self, name: str) -> np.ndarray:
        return self.rows()[:, self.schema.index(name)]

    def subset(self, keep: Iterable[bool] | Iterable[int]) -> "Cohort":
        keep = list(keep)
        if keep and isinstance(keep[0], (bool, np.bool_)):
            recs = [r for r, k in zip(self.records, keep) if k]
        else:
            recs = [self.records[i] for i in keep]
        return Cohort(self.schema, recs)

    def truncate(self, max_length: int) -> "Cohort":
        return Cohort(self.schema, [PatientRecord(r.patient_id, r.values[:max_length]) for r in self.records])

    def where(self, **levels: str) -> "Cohort":
        """Records whose static variables take the given levels, e.g. ``where(Ethnic="African")``."""
        keep = []
        for r in self.records:
            ok = True
            for name, level in levels.items():
                v = self.schema[name]
                ok &= bool(r.values[0, self.schema.index(name)] == v.level_index(level))
            keep.append(ok)
        return self.subset(keep)

    def validate(self, *, strict_length: bool = True) -> list[str]:
        out = []
        for r in self.records:
            out.extend(check_record(r, self.schema, strict_length=strict_length))
        return out

    def equals(self, other: "Cohort", rtol: float = 1e-9) -> bool:
        if len(self) != len(other) or self.schema.hash() != other.schema.hash():
            return False
        for a, b in zip(self.records, other.records):
            if a.patient_id != b.patient_id or a.values.shape != b.values.shape:
                return False
            if not np.allclose(a.values, b.values, rtol=rtol, atol=1e-12):
                return False
        return True

    # --- tabular I/O -------------------------------------------------------

    def to_frame(self) -> pd.DataFrame:
        """Long format: patient_id, timepoint, then one column per variable (level names for non-numeric)."""
        frames = []
        for r in self.records:
            data = {"patient_id": [r.patient_id] * r.length, "timepoint": np.arange(r.length)}
            for j, v in enumerate(self.schema.variables):
                col = r.values[:, j]
                if v.is_numeric:
                    data[v.name] = col
                else:
                    data[v.name] = [v.levels[int(k)] for k in col]
            frames.append(pd.DataFrame(data))
        if not frames:
            return pd.DataFrame(columns=["patient_id", "timepoint", *self.schema.names])
        return pd.concat(frames, ignore_index=True)

    @classmethod
    def from_frame(cls, df: pd.DataFrame, schema: VariableSchema) -> "Cohort":
        missing = [c for c in ["patient_id", "timepoint", *schema.names] if c not in df.columns]
        if missing:
            raise SchemaError(f"missing columns: {missing}")
        records = []
        for pid, g in df.groupby("patient_id", sort=False):
            g = g.sort_values("timepoint", kind="stable")
            values = np.empty((len(g), len(schema)))
            for j, v in enumerate(schema.variables):
                col = g[v.name]
                if v.is_numeric:
                    values[:, j] = col.to_numpy(dtype=np.float64)
                else:
                    lookup = {lvl: i for i, lvl in enumerate(v.levels)}
                    try:
                        values[:, j] = [lookup[str(x)] for x in col]
                    except KeyError as e:
                        raise SchemaError(f"record {pid}: unknown level {e.args[0]!r} for variable {v.name!r}") from None
            records.append(PatientRecord(str(pid), values))
        return cls(schema, records)

    def to_csv(self, path: str | Path) -> None:
        self.to_frame().to_csv(path, index=False, encoding="utf-8", lineterminator="\n")

    @classmethod
    def read_csv(cls, path: str | Path, schema: VariableSchema) -> "Cohort":
        df = pd.read_csv(path, dtype={"patient_id": str}, keep_default_na=False, encoding="utf-8")
        for v in schema.nonnumeric:
            if v.name in df.columns:
                df[v.name] = df[v.name].astype(str)
        return cls.from_frame(df, schema)


# ---------------------------------------------------------------------------
# encoding


def _forward(v: VariableSpec, x: np.ndarray) -> np.ndarray:
    if v.transform == "log":
        return np.log(x)
    if v.transform == "log1p":
        return np.log1p(x)
    return x


def _inverse(v: VariableSpec, y: np.ndarray) -> np.ndarray:
    if v.transform == "log":
        return np.exp(y)
    if v.transform == "log1p":
        return np.expm1(y)
    return y


@dataclass
class ScalingParams:
    """Per-numeric-variable (low, high) on the transformed scale."""

    bounds: dict[str, tuple[float, float]]

    @classmethod
    def fit(cls, cohort: Cohort) -> "ScalingParams":
        rows = cohort.rows()
        bounds = {}
        for j, v in enumerate(cohort.schema.variables):
            if v.is_numeric:
                t = _forward(v, rows[:, j]) if len(rows) else np.zeros(1)
                bounds[v.name] = (float(np.min(t)), float(np.max(t)))
        return cls(bounds)

    def scale(self, v: VariableSpec, x: np.ndarray) -> np.ndarray:
        lo, hi = self.bounds[v.name]
        span = hi - lo if hi > lo else 1.0
        return (_forward(v, x) - lo) / span

    def unscale(self, v: VariableSpec, y: np.ndarray) -> np.ndarray:
        lo, hi = self.bounds[v.name]
        span = hi - lo if hi > lo else 1.0
        return _inverse(v, lo + np.asarray(y, dtype=np.float64) * span)

    def to_dict(self) -> dict:
        return {k: [lo, hi] for k, (lo, hi) in self.bounds.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ScalingParams":
        return cls({k: (float(v[0]), float(v[1])) for k, v in d.items()})


@dataclass
class EncodedBatch:
    values: np.ndarray  # [batch, time, encoded_width]; zero-padded past each length
    lengths: np.ndarray
    scaling_params: ScalingParams
    patient_ids: list[str] | None = None


def encode_records(values: np.ndarray, schema: VariableSchema, scaling: ScalingParams) -> np.ndarray:
    """Encode a raw [..., n_variables] array into [..., encoded_width]."""
    values = np.asarray(values, dtype=np.float64)
    out = np.zeros(values.shape[:-1] + (schema.encoded_width,))
    for j, (v, sl) in enumerate(schema.layout()):
        col = values[..., j]
        if v.is_numeric:
            out[..., sl.start] = scaling.scale(v, col)
        else:
            idx = col.astype(np.int64)
            out[..., sl] = np.eye(len(v.levels))[idx]
    return out


def encode_cohort(cohort: Cohort, schema: VariableSchema | None = None,
                  scaling: ScalingParams | None = None) -> EncodedBatch:
    """One-hot the non-numeric variables and min-max scale the (transformed) numerics.

    Scaling parameters are fitted on ``cohort`` unless given. Raises
    :class:`SchemaError` naming the record and variable on an unknown level.
    """
    schema = schema or cohort.schema
    for r in cohort.records:
        if r.values.shape[1] != len(schema):
            raise SchemaError(f"record {r.patient_id}: expected {len(schema)} columns")
        for j, v in enumerate(schema.variables):
            if v.is_numeric:
                continue
            col = r.values[:, j]
            bad = (col < 0) | (col >= len(v.levels)) | (col != np.round(col))
            if np.any(bad):
                raise SchemaError(f"record {r.patient_id}: unknown level {col[bad][0]!r} for variable {v.name!r}")
    scaling = scaling or ScalingParams.fit(cohort)
    lengths = cohort.lengths
    t_max = int(lengths.max()) if len(lengths) else 0
    out = np.zeros((len(cohort), t_max, schema.encoded_width))
    for i, r in enumerate(cohort.records):
        out[i, : r.length] = encode_records(r.values, schema, scaling)
    return EncodedBatch(out, lengths, scaling, [r.patient_id for r in cohort.records])


def decode_array(values: np.ndarray, schema: VariableSchema, scaling: ScalingParams) -> np.ndarray:
    """Decode one record [time, encoded_width] back to raw [time, n_variables].

    Categorical blocks map to the argmax level (ties to the lowest index).
    Static variables are decided once per record from the time-averaged block.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] != schema.encoded_width:
        raise SchemaError(f"encoded width {values.shape[-1]} does not match schema width {schema.encoded_width}")
    out = np.empty(values.shape[:-1] + (len(schema),))
    for j, (v, sl) in enumerate(schema.layout()):
        if v.is_numeric:
            out[..., j] = scaling.unscale(v, values[..., sl.start])
        elif v.static:
            out[..., j] = np.argmax(values[..., sl].mean(axis=-2), axis=-1)[..., None]
        else:
            out[..., j] = np.argmax(values[..., sl], axis=-1)
    return out


def decode_cohort(batch: EncodedBatch, schema: VariableSchema) -> Cohort:
    if batch.values.shape[-1] != schema.encoded_width:
        raise SchemaError(
            f"encoded width {batch.values.shape[-1]} does not match schema width {schema.encoded_width}"
        )
    ids = batch.patient_ids or [f"syn-{i:05d}" for i in range(len(batch.values))]
    records = []
    for i, n in enumerate(batch.lengths):
        n = int(n)
        records.append(PatientRecord(ids[i], decode_array(batch.values[i, :n], schema, batch.scaling_params)))
    return Cohort(schema, records)


# ---------------------------------------------------------------------------
# segmentation of irregular source records


@dataclass
class SegmentReport:
    n_input: int = 0
    n_segments: int = 0
    n_kept: int = 0
    n_dropped_short: int = 0
    n_dropped_incomplete: int = 0


def segment_records(raw: pd.DataFrame, schema: VariableSchema, gap_months: int = 6,
                    ) -> tuple[list[PatientRecord], SegmentReport]:
    """Summarise irregular visits into monthly records and split them at long gaps.

    ``raw`` has columns ``patient_id``, ``month`` (integer calendar-month index;
    several rows per month allowed, later rows win) and one column per schema
    variable, with NaN for values not reported in a row. Months without any row
    are filled forward inside a segment. A run of more than ``gap_months``
    empty months starts a new segment. Segment lengths are truncated down to a
    multiple of ten (at most 100); segments under ten months are dropped.
    """
    report = SegmentReport()
    out = []
    for pid, g in raw.groupby("patient_id", sort=False):
        report.n_input += 1
        g = g.sort_values("month", kind="stable")
        monthly = g.groupby("month", sort=True)[schema.names].last()
        months = monthly.index.to_numpy(dtype=np.int64)
        breaks = np.flatnonzero(np.diff(months) - 1 > gap_months) + 1
        for k, (lo, hi) in enumerate(zip(np.r_[0, breaks], np.r_[breaks, len(months)])):
            report.n_segments += 1
            seg = monthly.iloc[lo:hi]
            grid = seg.reindex(np.arange(seg.index[0], seg.index[-1] + 1)).ffill().bfill()
            n = min(len(grid) // 10 * 10, MAX_LENGTH)
            if n < MIN_LENGTH:
                report.n_dropped_short += 1
                continue
            if grid.isna().any().any():
                report.n_dropped_incomplete += 1
                continue
            grid = grid.iloc[:n]
            values = np.empty((n, len(schema)))
            for j, v in enumerate(schema.variables):
                col = grid[v.name]
                if v.is_numeric:
                    values[:, j] = col.to_numpy(dtype=np.float64)
                else:
                    values[:, j] = [x if isinstance(x, (int, float, np.number)) else v.level_index(str(x))
                                    for x in col]
            out.append(PatientRecord(f"{pid}-{k}", values))
            report.n_kept += 1
    return out, report


def stack_equal_length(records: Sequence[PatientRecord]) -> np.ndarray:
    return np.stack([r.values for r in records])
