import json

import numpy as np
import pandas as pd
import pytest

from conftest import make_table
from crashsynth.baselines import marginal_shuffle
from crashsynth.config import QualityConfig
from crashsynth.data_schema import Table
from crashsynth.errors import DataError, SchemaError
from crashsynth.quality_eval import (LogisticClassifier, alpha_precision, auc, beta_recall, c2st, density_export,
                                     evaluate_quality, pcd, support_coverage, total_variation)


def shifted(table: Table, column: str, amount: float) -> Table:
    frame = table.frame.copy()
    frame[column] = frame[column] + amount
    return Table(table.schema, frame)


class TestAuc:
    def test_hand_example(self):
        assert auc([0, 0, 1, 1], [0.1, 0.4, 0.35, 0.8]) == 0.75

    def test_reversed_ranking(self):
        assert auc([0, 0, 1, 1], [0.9, 0.8, 0.2, 0.1]) == 0.0

    def test_ties_count_half(self):
        assert auc([0, 1], [0.5, 0.5]) == 0.5

    def test_negated_scores_complement(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 2, size=50)
        labels[:2] = [0, 1]
        scores = rng.normal(size=50)
        assert auc(labels, scores) + auc(labels, -scores) == pytest.approx(1.0)

    def test_single_class(self):
        with pytest.raises(DataError):
            auc([1, 1], [0.2, 0.3])


def test_logistic_classifier_separates_lines():
    x = np.array([[-2.0], [-1.0], [1.0], [2.0]])
    y = np.array([0, 0, 1, 1])
    model = LogisticClassifier(iterations=200, lr=0.5).fit(x, y)
    assert np.all((model.predict_proba(x) > 0.5) == y.astype(bool))


class TestC2st:
    def test_exchangeable_halves(self, simulated):
        half = len(simulated) // 2
        assert c2st(simulated.take(range(half)), simulated.take(range(half, len(simulated)))) >= 0.9

    def test_separable_tables(self, simulated):
        std = simulated.frame["AAHT"].std()
        assert c2st(simulated, shifted(simulated, "AAHT", 100 * std)) <= 0.05

    def test_row_order_does_not_matter(self, table):
        synthetic = shifted(make_table(seed=9), "AAHT", 0.3)
        reversed_real = table.take(np.arange(len(table))[::-1])
        assert c2st(table, synthetic, seed=1) == c2st(reversed_real, synthetic, seed=1)

    def test_empty_table(self, table):
        with pytest.raises(DataError):
            c2st(table, table.take([]))

    def test_too_few_rows(self, table):
        with pytest.raises(DataError):
            c2st(table.take([0]), table.take([1]), folds=5)


class TestSupport:
    def test_identical_tables(self, simulated):
        assert alpha_precision(simulated, simulated) >= 0.95
        assert beta_recall(simulated, simulated) >= 0.95

    def test_exchangeable(self, table):
        other = shifted(make_table(seed=4), "Segment_Length", 0.2)
        assert alpha_precision(table, other) == pytest.approx(beta_recall(other, table))
        assert beta_recall(table, other) == pytest.approx(alpha_precision(other, table))

    def test_far_candidates_are_outside(self):
        reference = np.random.default_rng(0).normal(size=(200, 2))
        coverage = support_coverage(reference, reference + 50.0, [0.5, 0.9])
        np.testing.assert_array_equal(coverage, [0.0, 0.0])

    def test_scores_are_bounded(self, table):
        score = alpha_precision(table, shifted(table, "AAHT", 1000.0))
        assert 0.0 <= score <= 1.0


class TestPcd:
    def test_identical_tables(self, table):
        result = pcd(table, table)
        assert result.mean == 0.0
        assert np.all(result.matrix.to_numpy() == 0.0)

    def test_symmetric_and_bounded(self, table):
        result = pcd(table, marginal_shuffle(table, 40, seed=0))
        matrix = result.matrix.to_numpy()
        np.testing.assert_allclose(matrix, matrix.T)
        assert np.all((matrix >= 0.0) & (matrix <= 1.0))

    def test_constant_column_is_flagged(self, table):
        frame = table.frame.copy()
        frame["Light_Presence"] = 1
        result = pcd(table, Table(table.schema, frame))
        assert result.zero_variance_columns == ["Light_Presence"]
        assert np.all(result.matrix["Light_Presence"] == 0.0)

    def test_needs_two_rows(self, table):
        with pytest.raises(DataError):
            pcd(table.take([0]), table)


class TestDensity:
    def test_total_variation(self):
        assert total_variation(np.array([1, 1]), np.array([1, 1])) == 0.0
        assert total_variation(np.array([2, 0]), np.array([0, 5])) == 1.0
        assert total_variation(np.array([3, 1]), np.array([1, 1])) == pytest.approx(0.25)

    def test_identical_tables_have_identical_counts(self, table, tmp_path):
        export = density_export(table, table, ["Hour", "AAHT"], [["AAHT", "Light_Presence"]], bins=5,
                                out_dir=tmp_path)
        hour = export.histograms["Hour"]
        assert hour["bin"].tolist() == [0, 1, 2]
        assert (hour["real"] == hour["synthetic"]).all()
        assert len(export.histograms["AAHT"]) == 5
        joint = export.joints["AAHT__Light_Presence"]
        assert len(joint) == 10 and (joint["real"] == joint["synthetic"]).all()
        assert export.total_variation == {"Hour": 0.0, "AAHT": 0.0}
        assert sorted(p.name for p in export.files) == [
            "histogram_aaht.csv", "histogram_hour.csv", "joint_aaht__light_presence.csv"]
        assert pd.read_csv(tmp_path / "histogram_hour.csv")["real"].sum() == len(table)

    def test_unknown_column(self, table):
        with pytest.raises(SchemaError):
            density_export(table, table, ["Speed_Limit"])


def test_evaluate_quality_report(table, tmp_path):
    synthetic = marginal_shuffle(table, 40, seed=1)
    config = QualityConfig(folds=2, iterations=20, columns=["Hour"], joint_pairs=[["AAHT", "Light_Presence"]])
    report = evaluate_quality(table, synthetic, config, seed=0, out_dir=tmp_path)
    document = report.to_dict()
    for key in ("c2st", "alpha_precision", "beta_recall"):
        assert 0.0 <= document[key] <= 1.0
    assert document["density_files"] == ["histogram_hour.csv", "joint_aaht__light_presence.csv"]
    json.dumps(document)
