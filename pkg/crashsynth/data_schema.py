"""
Typed tabular data model: column schemas, tables, CSV ingestion, one-hot
encoding with its inverse, and the stratified train/test split.
"""

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import toml
from pydantic import BaseModel, ConfigDict, ValidationError

from .config import DISCRETE_KINDS, PROVENANCE_COLUMN, SUPPORTED_KINDS, app_config
from .errors import DataError, SchemaError, ShapeError
from .validators import validate_fraction

log = logging.getLogger(__name__)

ROW_ID = "row_id"


@dataclass(frozen=True)
class ColumnSchema:
    """
    Declaration of one table column.

    Args:
        name: Column header
        kind: count, ordinal, nominal or real_valued
        value_map: Ordered raw values for discrete kinds
        mean: Fitted mean (real_valued only)
        std: Fitted standard deviation (real_valued only)
        role: feature, target or provenance
    """
    name: str
    kind: str
    value_map: Tuple[Any, ...] = ()
    mean: Optional[float] = None
    std: Optional[float] = None
    role: str = "feature"

    def __post_init__(self):
        if self.kind not in SUPPORTED_KINDS:
            raise SchemaError(f"Column '{self.name}': unknown kind '{self.kind}' (expected one of {SUPPORTED_KINDS})")
        if self.role not in ("feature", "target", "provenance"):
            raise SchemaError(f"Column '{self.name}': unknown role '{self.role}'")
        if self.is_discrete:
            if len(self.value_map) < 2:
                raise SchemaError(f"Column '{self.name}': discrete columns need at least 2 values")
            if len(set(self.value_map)) != len(self.value_map):
                raise SchemaError(f"Column '{self.name}': duplicate entries in value map")
            if self.kind == "count" and len(self.value_map) > app_config.MAX_COUNT_CARDINALITY:
                raise SchemaError(
                    f"Column '{self.name}': {len(self.value_map)} distinct counts exceed the cap of "
                    f"{app_config.MAX_COUNT_CARDINALITY}; bin the column or declare it real_valued"
                )
        elif self.value_map:
            raise SchemaError(f"Column '{self.name}': real_valued columns take no value map")
        if self.std is not None and not self.std > 0:
            raise SchemaError(f"Column '{self.name}': standard deviation must be positive, got {self.std}")

    @property
    def is_discrete(self) -> bool:
        return self.kind in DISCRETE_KINDS

    @property
    def cardinality(self) -> int:
        return len(self.value_map)

    @property
    def is_fitted(self) -> bool:
        return self.is_discrete or (self.mean is not None and self.std is not None)


@dataclass(frozen=True)
class TableSchema:
    """Ordered column declarations with exactly one target column."""
    columns: Tuple[ColumnSchema, ...]

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError("Duplicate column names in schema")
        targets = [c for c in self.columns if c.role == "target"]
        if len(targets) != 1:
            raise SchemaError(f"Schema needs exactly one target column, found {len(targets)}")
        target = targets[0]
        if not target.is_discrete or not all(isinstance(v, (int, np.integer)) for v in target.value_map):
            raise SchemaError(f"Target '{target.name}' must be a discrete column with integer values")

    @property
    def names(self) -> List[str]:
        return [c.name for c in self.columns]

    @property
    def target(self) -> ColumnSchema:
        return next(c for c in self.columns if c.role == "target")

    @property
    def model_columns(self) -> List[ColumnSchema]:
        """Columns the generator models: features and target, provenance excluded."""
        return [c for c in self.columns if c.role != "provenance"]

    @property
    def feature_columns(self) -> List[ColumnSchema]:
        return [c for c in self.columns if c.role == "feature"]

    @property
    def continuous_columns(self) -> List[ColumnSchema]:
        return [c for c in self.model_columns if not c.is_discrete]

    @property
    def discrete_columns(self) -> List[ColumnSchema]:
        return [c for c in self.model_columns if c.is_discrete]

    @property
    def has_provenance(self) -> bool:
        return any(c.role == "provenance" for c in self.columns)

    @property
    def is_fitted(self) -> bool:
        return all(c.is_fitted for c in self.columns)

    def column(self, name: str) -> ColumnSchema:
        for c in self.columns:
            if c.name == name:
                return c
        raise SchemaError(f"Unknown column '{name}'")

    def fit(self, frame: pd.DataFrame) -> "TableSchema":
        """
        Compute standardization for every real-valued column.

        Args:
            frame: Rows of the designated fitting split

        Returns:
            New schema with mean/std filled in
        """
        fitted = []
        for c in self.columns:
            if c.kind == "real_valued":
                values = frame[c.name].to_numpy(dtype=np.float64)
                std = float(values.std()) if len(values) > 1 else 0.0
                fitted.append(replace(c, mean=float(values.mean()), std=std if std > 0 else 1.0))
            else:
                fitted.append(c)
        return TableSchema(tuple(fitted))

    def with_provenance(self) -> "TableSchema":
        if self.has_provenance:
            return self
        marker = ColumnSchema(PROVENANCE_COLUMN, "nominal", (0, 1), role="provenance")
        return TableSchema(self.columns + (marker,))

    def without_provenance(self) -> "TableSchema":
        return TableSchema(tuple(self.model_columns))

    def fingerprint(self) -> str:
        """SHA-256 over names, kinds, roles and value maps (standardization excluded)."""
        payload = [[c.name, c.kind, c.role, [str(v) for v in c.value_map]] for c in self.model_columns]
        return hashlib.sha256(json.dumps(payload).encode("utf-8")).hexdigest()

    def to_dict(self) -> Dict[str, Any]:
        columns = []
        for c in self.columns:
            entry: Dict[str, Any] = {"name": c.name, "kind": c.kind}
            if c.is_discrete:
                entry["values"] = [v.item() if isinstance(v, np.generic) else v for v in c.value_map]
            if c.mean is not None:
                entry["mean"] = c.mean
                entry["std"] = c.std
            if c.role == "target":
                entry["target"] = True
            if c.role == "provenance":
                entry["provenance"] = True
            columns.append(entry)
        return {"columns": columns}

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> "TableSchema":
        try:
            sidecar = _SchemaSidecar.model_validate(document)
        except ValidationError as e:
            raise SchemaError(f"Invalid schema sidecar: {e}") from e
        columns = []
        for decl in sidecar.columns:
            role = "target" if decl.target else "provenance" if decl.provenance else "feature"
            columns.append(ColumnSchema(
                name=decl.name, kind=decl.kind, value_map=tuple(decl.values or ()),
                mean=decl.mean, std=decl.std, role=role,
            ))
        return cls(tuple(columns))


class _ColumnDeclaration(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    kind: Literal["count", "ordinal", "nominal", "real_valued"]
    values: Optional[List[Any]] = None
    target: bool = False
    provenance: bool = False
    mean: Optional[float] = None
    std: Optional[float] = None


class _SchemaSidecar(BaseModel):
    model_config = ConfigDict(extra="forbid")

    columns: List[_ColumnDeclaration]


@dataclass(frozen=True)
class Table:
    """Schema plus a frame holding one raw value per column; the index carries row ids."""
    schema: TableSchema
    frame: pd.DataFrame = field(repr=False)

    def __post_init__(self):
        missing = [n for n in self.schema.names if n not in self.frame.columns]
        if missing:
            raise SchemaError(f"Frame lacks schema columns {missing}")
        for c in self.schema.columns:
            if c.is_discrete and len(self.frame):
                unknown = ~self.frame[c.name].isin(list(c.value_map))
                if unknown.any():
                    position = int(np.flatnonzero(unknown.to_numpy())[0])
                    raise DataError(
                        f"Column '{c.name}', row {position + 1}: value "
                        f"{self.frame[c.name].iloc[position]!r} not in value map"
                    )

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def row_ids(self) -> np.ndarray:
        return self.frame.index.to_numpy()

    @property
    def target_name(self) -> str:
        return self.schema.target.name

    def codes(self, name: str) -> np.ndarray:
        """Value-map indices of a discrete column."""
        c = self.schema.column(name)
        if not c.is_discrete:
            raise SchemaError(f"Column '{name}' is not discrete")
        return pd.Categorical(self.frame[name], categories=list(c.value_map)).codes.astype(np.int64)

    def target_values(self) -> np.ndarray:
        return self.frame[self.target_name].to_numpy(dtype=np.float64)

    def take(self, positions) -> "Table":
        return Table(self.schema, self.frame.iloc[np.asarray(positions, dtype=np.int64)])

    def where(self, mask: np.ndarray) -> "Table":
        return Table(self.schema, self.frame.loc[np.asarray(mask, dtype=bool)])

    def with_schema(self, schema: TableSchema) -> "Table":
        return Table(schema, self.frame[schema.names])

    @classmethod
    def empty(cls, schema: TableSchema) -> "Table":
        frame = pd.DataFrame({n: pd.Series(dtype=object) for n in schema.names})
        frame.index.name = ROW_ID
        return cls(schema, frame)


def concat_tables(tables: Sequence[Table], schema: Optional[TableSchema] = None) -> Table:
    """Stack tables sharing a schema, keeping their row ids."""
    schema = schema or tables[0].schema
    frame = pd.concat([t.frame[schema.names] for t in tables], axis=0)
    frame.index.name = ROW_ID
    return Table(schema, frame)


def numeric_matrix(table: Table, columns: Sequence[str]) -> np.ndarray:
    """
    Numeric view of the named columns: value-map indices for discrete columns,
    raw values for real-valued ones.

    Args:
        table: Source table
        columns: Column names in output order

    Returns:
        rows x len(columns) float matrix
    """
    out = np.empty((len(table), len(columns)), dtype=np.float64)
    for j, name in enumerate(columns):
        c = table.schema.column(name)
        out[:, j] = table.codes(name) if c.is_discrete else table.frame[name].to_numpy(dtype=np.float64)
    return out


def standardize_matrix(matrix: np.ndarray, means: Optional[np.ndarray] = None,
                       stds: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Column-wise z-scores; zero-variance columns keep unit scale."""
    if means is None:
        means = matrix.mean(axis=0) if len(matrix) else np.zeros(matrix.shape[1])
    if stds is None:
        stds = matrix.std(axis=0) if len(matrix) else np.ones(matrix.shape[1])
        stds = np.where(stds > 0, stds, 1.0)
    return (matrix - means) / stds, means, stds


# --- Schema sidecar and CSV I/O ---

def load_schema(schema_path: Path) -> TableSchema:
    """Read a TOML schema sidecar."""
    try:
        document = toml.load(schema_path)
    except FileNotFoundError:
        raise SchemaError(f"Schema sidecar not found at '{schema_path}'") from None
    except (toml.TomlDecodeError, UnicodeDecodeError) as e:
        raise SchemaError(f"Schema sidecar '{schema_path}' is not valid TOML: {e}") from e
    return TableSchema.from_dict(document)


def save_schema(schema: TableSchema, schema_path: Path) -> Path:
    schema_path = Path(schema_path)
    schema_path.parent.mkdir(parents=True, exist_ok=True)
    schema_path.write_text(toml.dumps(schema.to_dict()), encoding="utf-8")
    return schema_path


def schema_path_for(csv_path: Path) -> Path:
    csv_path = Path(csv_path)
    return csv_path.with_name(f"{csv_path.stem}.schema.toml")


def _coerce_integer_codes(frame: pd.DataFrame, schema: TableSchema) -> pd.DataFrame:
    for c in schema.columns:
        if c.is_discrete and all(isinstance(v, (int, np.integer)) for v in c.value_map):
            frame[c.name] = frame[c.name].astype(np.int64)
    return frame


def load_csv(path: Path, schema_path: Optional[Path] = None) -> Table:
    """
    Read a CSV file whose columns are declared by a schema sidecar.

    Args:
        path: CSV file (comma delimiter, header row, UTF-8)
        schema_path: Sidecar; defaults to ``<stem>.schema.toml`` next to the CSV

    Returns:
        Validated Table

    Raises:
        DataError: Unreadable file, missing column, unparseable number or unknown category
    """
    schema = load_schema(schema_path or schema_path_for(path))
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except FileNotFoundError as e:
        raise DataError(f"{path}: file not found") from e
    except UnicodeDecodeError as e:
        raise DataError(f"{path}: not UTF-8 text ({e.reason} at byte {e.start})") from e
    except pd.errors.EmptyDataError as e:
        raise DataError(f"{path}: file is empty") from e
    except pd.errors.ParserError as e:
        raise DataError(f"{path}: malformed CSV: {e}") from e
    missing = [n for n in schema.names if n not in raw.columns]
    if missing:
        raise DataError(f"{path}: missing column(s) {missing}")
    extra = [n for n in raw.columns if n not in schema.names]
    if extra:
        raise DataError(f"{path}: column(s) {extra} are not declared in the schema")

    columns = {}
    for c in schema.columns:
        cells = raw[c.name].str.strip()
        if c.is_discrete:
            lookup = {str(v): v for v in c.value_map}
            parsed = cells.map(lookup)
            bad = parsed.isna().to_numpy()
        else:
            parsed = pd.to_numeric(cells, errors="coerce")
            bad = (~np.isfinite(parsed.to_numpy(dtype=np.float64)))
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            problem = "unknown category" if c.is_discrete else "unparseable number"
            raise DataError(f"{path}: row {row + 1}, column '{c.name}': {problem} {cells.iloc[row]!r}")
        columns[c.name] = parsed.to_numpy() if c.is_discrete else parsed.to_numpy(dtype=np.float64)
    frame = _coerce_integer_codes(pd.DataFrame(columns, columns=schema.names), schema)
    frame.index.name = ROW_ID
    log.info("Loaded %d rows from %s", len(frame), path)
    return Table(schema, frame)


def write_csv(table: Table, path: Path, schema_path: Optional[Path] = None) -> Path:
    """Write the table in the CSV dialect load_csv reads, plus its schema sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.frame[table.schema.names].to_csv(path, index=False, encoding="utf-8", lineterminator="\n")
    save_schema(table.schema, schema_path or schema_path_for(path))
    return path


# --- Encoding ---

@dataclass(frozen=True)
class ColumnSpan:
    name: str
    kind: str
    start: int
    stop: int

    @property
    def width(self) -> int:
        return self.stop - self.start


@dataclass(frozen=True)
class EncodedMatrix:
    """Standardized reals followed by one-hot spans, with the span layout."""
    values: np.ndarray
    layout: Tuple[ColumnSpan, ...]
    row_ids: Optional[np.ndarray] = None

    @property
    def width(self) -> int:
        return self.layout[-1].stop if self.layout else 0

    def span(self, name: str) -> ColumnSpan:
        for s in self.layout:
            if s.name == name:
                return s
        raise SchemaError(f"Unknown column '{name}' in layout")


def encoding_layout(schema: TableSchema) -> Tuple[ColumnSpan, ...]:
    """Continuous columns first, then discrete columns, each block in schema order."""
    spans, start = [], 0
    for c in schema.continuous_columns + schema.discrete_columns:
        width = c.cardinality if c.is_discrete else 1
        spans.append(ColumnSpan(c.name, c.kind, start, start + width))
        start += width
    return tuple(spans)


def encode(table: Table) -> EncodedMatrix:
    """
    One-hot encode discrete columns and standardize real-valued ones.

    Raises:
        SchemaError: If the schema has not been fitted
    """
    schema = table.schema
    if not schema.is_fitted:
        raise SchemaError("Schema is not fitted; call TableSchema.fit on the training split first")
    layout = encoding_layout(schema)
    values = np.zeros((len(table), layout[-1].stop if layout else 0), dtype=np.float64)
    for span in layout:
        c = schema.column(span.name)
        if c.is_discrete:
            values[np.arange(len(table)), span.start + table.codes(c.name)] = 1.0
        else:
            values[:, span.start] = (table.frame[c.name].to_numpy(dtype=np.float64) - c.mean) / c.std
    return EncodedMatrix(values, layout, table.row_ids)


def decode_encoded(matrix, schema: TableSchema, row_ids: Optional[np.ndarray] = None) -> Table:
    """
    Map an encoded matrix back to raw table rows.

    One-hot spans decode to their argmax category (lowest index wins ties);
    real columns are de-standardized.

    Args:
        matrix: EncodedMatrix or bare ndarray of the schema's width
        schema: Fitted schema the matrix was produced with
        row_ids: Optional ids for the decoded rows

    Raises:
        ShapeError: If the width does not match the schema layout
    """
    values = matrix.values if isinstance(matrix, EncodedMatrix) else np.asarray(matrix, dtype=np.float64)
    if row_ids is None and isinstance(matrix, EncodedMatrix):
        row_ids = matrix.row_ids
    model_schema = schema.without_provenance()
    layout = encoding_layout(model_schema)
    expected = layout[-1].stop if layout else 0
    if values.ndim != 2 or values.shape[1] != expected:
        raise ShapeError(f"decode_encoded: expected width {expected}, got shape {values.shape}")
    columns = {}
    for span in layout:
        c = model_schema.column(span.name)
        block = values[:, span.start:span.stop]
        if c.is_discrete:
            columns[c.name] = np.asarray(c.value_map, dtype=object)[np.argmax(block, axis=1)]
        else:
            columns[c.name] = block[:, 0] * c.std + c.mean
    frame = _coerce_integer_codes(pd.DataFrame(columns, columns=model_schema.names), model_schema)
    frame.index = pd.Index(np.arange(len(frame)) if row_ids is None else row_ids, name=ROW_ID)
    return Table(model_schema, frame)


# --- Splitting ---

def split(table: Table, train_fraction: float, seed: int, stratify: bool = True) -> Tuple[Table, Table]:
    """
    Disjoint, seed-deterministic train/test partition.

    With ``stratify`` each target stratum (zero / non-zero) sends
    ``ceil((1 - train_fraction) * n)`` of its rows to the test side.

    Args:
        table: Rows to partition
        train_fraction: Share of rows kept for training, in (0, 1)
        seed: Random seed
        stratify: Split zero and non-zero target rows separately

    Returns:
        (train, test) tables
    """
    validate_fraction(train_fraction, "train_fraction")
    rng = np.random.default_rng(seed)
    if stratify:
        zero = table.target_values() == 0
        strata = [np.flatnonzero(zero), np.flatnonzero(~zero)]
    else:
        strata = [np.arange(len(table))]
    train_pos, test_pos = [], []
    for positions in strata:
        shuffled = rng.permutation(positions)
        n_test = math.ceil(round(len(positions) * (1.0 - train_fraction), 9))
        test_pos.append(shuffled[:n_test])
        train_pos.append(shuffled[n_test:])
    train = table.take(np.sort(np.concatenate(train_pos)))
    test = table.take(np.sort(np.concatenate(test_pos)))
    log.info("Split %d rows into %d train / %d test", len(table), len(train), len(test))
    return train, test
