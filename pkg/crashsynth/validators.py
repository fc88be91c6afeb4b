"""
Validation module for shapes, numeric health, schemas and upstream artifacts.
"""

from pathlib import Path
from typing import Any, Dict, Sequence

import numpy as np

from .errors import ArtifactError, ConfigError, NumericalError, SchemaError, ShapeError


def require_finite(values: np.ndarray, where: str) -> np.ndarray:
    """
    Reject arrays containing NaN or Inf.

    Args:
        values: Array to inspect
        where: Name of the producing operation, used in the message

    Returns:
        The same array, for chaining

    Raises:
        NumericalError: If any entry is not finite
    """
    if not np.all(np.isfinite(values)):
        bad = int(np.size(values) - np.count_nonzero(np.isfinite(values)))
        raise NumericalError(f"{where} produced {bad} non-finite value(s)")
    return values


def require_shape(actual: Sequence[int], expected: Sequence[int], what: str) -> None:
    """
    Check an exact shape.

    Args:
        actual: Observed shape
        expected: Required shape
        what: Description of the checked object

    Raises:
        ShapeError: On mismatch
    """
    if tuple(actual) != tuple(expected):
        raise ShapeError(f"{what}: expected shape {tuple(expected)}, got {tuple(actual)}")


def schema_diff(left, right) -> Dict[str, Any]:
    """
    Compare two table schemas column by column.

    Args:
        left: First TableSchema
        right: Second TableSchema

    Returns:
        dict: Differences keyed by column name; empty when compatible
    """
    differences = {}
    left_cols = {c.name: c for c in left.columns}
    right_cols = {c.name: c for c in right.columns}
    for name in sorted(set(left_cols) | set(right_cols)):
        if name not in right_cols:
            differences[name] = "missing on the right"
        elif name not in left_cols:
            differences[name] = "missing on the left"
        else:
            a, b = left_cols[name], right_cols[name]
            if a.kind != b.kind:
                differences[name] = f"kind {a.kind} != {b.kind}"
            elif list(a.value_map) != list(b.value_map):
                differences[name] = "value maps differ"
    return differences


def require_same_schema(left, right, ignore=()) -> None:
    """
    Raise when two schemas disagree on any column other than the ignored ones.

    Args:
        left: First TableSchema
        right: Second TableSchema
        ignore: Column names exempt from comparison

    Raises:
        SchemaError: With the full column diff in the message
    """
    differences = {k: v for k, v in schema_diff(left, right).items() if k not in set(ignore)}
    if differences:
        detail = "; ".join(f"{name}: {issue}" for name, issue in differences.items())
        raise SchemaError(f"Schema mismatch: {detail}")


def require_artifact(path: Path, produced_by: str) -> Path:
    """
    Make sure an upstream artifact exists before a stage reads it.

    Args:
        path: Expected file location
        produced_by: Subcommand that writes the file

    Returns:
        The path

    Raises:
        ArtifactError: Naming the expected file and the stage to run first
    """
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"Expected '{path}' (run `crashsynth {produced_by}` first)")
    return path


def validate_fraction(value: float, name: str) -> float:
    """Check that a fraction lies strictly inside (0, 1)."""
    if not 0.0 < value < 1.0:
        raise ConfigError(f"{name} must lie strictly between 0 and 1, got {value}")
    return value
