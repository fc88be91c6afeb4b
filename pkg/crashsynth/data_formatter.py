"""
Data formatting module for reports, JSON artifacts and derived file names.
"""

import dataclasses
import hashlib
import json
import re
from pathlib import Path
from typing import Any, Dict, Iterable, List

import numpy as np
import pandas as pd

from .errors import ArtifactError


def sanitize_name(name: str) -> str:
    """
    Derive a file-name fragment from a column name.

    Args:
        name: Column name

    Returns:
        Lower-cased name with every run of characters outside [a-z0-9] replaced by "_"
    """
    return re.sub(r"[^a-z0-9]+", "_", name.lower())


def to_jsonable(value: Any) -> Any:
    """
    Convert numpy, pandas and dataclass values into plain JSON types.

    Args:
        value: Arbitrary nested value

    Returns:
        Structure made of dict, list, str, int, float, bool and None
    """
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return to_jsonable(dataclasses.asdict(value))
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, pd.DataFrame):
        return to_jsonable(value.to_dict(orient="split"))
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def write_json(path: Path, data: Any) -> Path:
    """Write JSON with sorted keys and a trailing newline."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_jsonable(data), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def read_json(path: Path) -> Dict[str, Any]:
    """
    Read a JSON artifact.

    Raises:
        ArtifactError: If the file is missing or not valid JSON
    """
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"Expected JSON artifact at '{path}'")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ArtifactError(f"'{path}' is not valid JSON: {e}") from e


def write_frame(frame: pd.DataFrame, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def format_metric(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return f"{value:.4f}"
    return str(value)


def format_section(title: str, rows: Dict[str, Any]) -> List[str]:
    """
    Render one titled block of ``key: value`` lines.

    Args:
        title: Block heading
        rows: Ordered metrics

    Returns:
        Lines of text
    """
    width = max((len(k) for k in rows), default=0)
    lines = [title, "-" * len(title)]
    lines += [f"{k.ljust(width)}  {format_metric(v)}" for k, v in rows.items()]
    return lines + [""]


def format_table(frame: pd.DataFrame) -> str:
    """Fixed-width text rendering with four decimals."""
    return frame.to_string(float_format=lambda v: f"{v:.4f}")


class ReportFormatter:
    """Class to render structured reports as text."""

    @staticmethod
    def quality(report: Dict[str, Any]) -> str:
        """
        Render a quality report.

        Args:
            report: Output of ``QualityReport.to_dict``

        Returns:
            Multi-line text
        """
        lines = format_section("Synthetic data quality", {
            "c2st": report["c2st"],
            "alpha_precision": report["alpha_precision"],
            "beta_recall": report["beta_recall"],
            "pcd_mean": report["pcd_mean"],
        })
        if report.get("zero_variance_columns"):
            lines += format_section("Zero-variance columns", {
                name: "correlations reported as 0" for name in report["zero_variance_columns"]
            })
        if report.get("total_variation"):
            lines += format_section("Total variation distance", report["total_variation"])
        return "\n".join(lines)

    @staticmethod
    def accuracy(reports: Iterable[Dict[str, Any]]) -> str:
        """
        Render accuracy reports as one table, one row per model.

        Args:
            reports: Dicts with a ``model`` key plus the four error metrics

        Returns:
            Text table
        """
        frame = pd.DataFrame(list(reports)).set_index("model")
        return format_table(frame[["mse", "rmse", "nonzero_mse", "nonzero_rmse"]])

    @staticmethod
    def importance(ranking: pd.DataFrame) -> str:
        """Render a Shapley importance ranking (rank, feature, mean_abs_phi)."""
        return format_table(ranking.set_index("rank"))
