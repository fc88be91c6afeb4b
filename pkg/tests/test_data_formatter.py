import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from crashsynth.data_formatter import (ReportFormatter, file_sha256, format_section, read_json, sanitize_name,
                                       to_jsonable, write_json)
from crashsynth.errors import ArtifactError


@pytest.mark.parametrize("name, expected", [
    ("AAHT", "aaht"),
    ("Light_Presence", "light_presence"),
    ("Curvature (degree)", "curvature_degree_"),
    ("Grade-%", "grade_"),
])
def test_sanitize_name(name, expected):
    assert sanitize_name(name) == expected


def test_to_jsonable():
    @dataclass
    class Point:
        x: float
        label: str

    value = {"array": np.array([1, 2]), "scalar": np.float64(0.5), "path": Path("a/b"),
             "missing": float("nan"), "point": Point(1.0, "p"), 3: (np.int64(4),)}
    assert to_jsonable(value) == {"array": [1, 2], "scalar": 0.5, "path": "a/b", "missing": None,
                                  "point": {"x": 1.0, "label": "p"}, "3": [4]}


def test_json_is_sorted_and_stable(tmp_path):
    first = write_json(tmp_path / "a.json", {"b": 1, "a": [1.5, 2]})
    second = write_json(tmp_path / "b.json", {"a": [1.5, 2], "b": 1})
    assert first.read_text() == second.read_text()
    assert first.read_text().endswith("\n")
    assert file_sha256(first) == file_sha256(second)
    assert read_json(first) == {"a": [1.5, 2], "b": 1}


def test_read_json_errors(tmp_path):
    with pytest.raises(ArtifactError):
        read_json(tmp_path / "absent.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{")
    with pytest.raises(ArtifactError, match="not valid JSON"):
        read_json(broken)


def test_format_section():
    lines = format_section("Scores", {"c2st": 0.5, "n": 3})
    assert lines == ["Scores", "------", "c2st  0.5000", "n     3", ""]


def test_quality_report_text():
    text = ReportFormatter.quality({"c2st": 0.8, "alpha_precision": 0.9, "beta_recall": 0.7, "pcd_mean": 0.1,
                                    "zero_variance_columns": ["Hour"], "total_variation": {"AAHT": 0.2}})
    assert "Zero-variance columns" in text
    assert "0.8000" in text


def test_accuracy_table():
    rows = [{"model": "zip", "mse": 1.0, "rmse": 1.0, "nonzero_mse": 4.0, "nonzero_rmse": 2.0, "n": 5}]
    text = ReportFormatter.accuracy(rows)
    assert "zip" in text and "4.0000" in text
    json.dumps(rows)


def test_importance_text():
    ranking = pd.DataFrame({"rank": [1, 2], "feature": ["AAHT", "Hour"], "mean_abs_phi": [0.3, 0.1]})
    assert "AAHT" in ReportFormatter.importance(ranking)
