import math

import numpy as np
import pandas as pd
import pytest

from crashsynth.config import GbtConfig
from crashsynth.errors import ConfigError, DataError, SchemaError, ShapeError
from crashsynth.predictors import (TreeEnsemble, candidate_thresholds, evaluate, feature_matrix, grid_search,
                                   load_gbt, predict_gbt, save_gbt, train_gbt, train_gbt_matrix)


class TestEvaluate:
    def test_hand_example(self):
        report = evaluate([0.0, 0.0], [0, 2])
        assert report.mse == 2.0
        assert report.rmse == pytest.approx(math.sqrt(2.0))
        assert report.nonzero_mse == 4.0
        assert report.nonzero_rmse == 2.0
        assert (report.n, report.n_nonzero) == (2, 1)

    def test_no_nonzero_targets(self):
        report = evaluate([1.0, 0.5], [0, 0])
        assert report.mse == pytest.approx(0.625)
        assert math.isnan(report.nonzero_mse)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            evaluate([1.0], [1, 2])

    def test_csv_row(self, tmp_path):
        path = evaluate([1.0, 2.0], [1, 0]).write_csv(tmp_path / "accuracy.csv", "gbt_original")
        row = pd.read_csv(path).iloc[0]
        assert row["model"] == "gbt_original"
        assert row["mse"] == pytest.approx(2.0)


def test_candidate_thresholds_are_midpoints():
    np.testing.assert_allclose(candidate_thresholds(np.array([3.0, 1.0, 2.0, 2.0]), 10), [1.5, 2.5])
    assert len(candidate_thresholds(np.linspace(0, 1, 1000), 16)) == 15
    assert len(candidate_thresholds(np.ones(5), 16)) == 0


def test_constant_target_gives_constant_prediction():
    x = np.random.default_rng(0).normal(size=(30, 2))
    model = train_gbt_matrix(x, np.full(30, 1.5), GbtConfig(n_trees=5), ["a", "b"])
    np.testing.assert_allclose(model.predict_matrix(x), 1.5)


def test_single_split_is_learned_exactly():
    x = np.linspace(0.0, 1.0, 20)[:, None]
    y = np.where(x[:, 0] < 0.5, 0.0, 3.0)
    model = train_gbt_matrix(x, y, GbtConfig(n_trees=1, max_depth=1, lr=1.0, min_leaf=1), ["x"])
    assert np.mean((model.predict_matrix(x) - y) ** 2) <= 1e-6
    assert model.trees[0].threshold[0] == pytest.approx(0.5, abs=0.06)


def test_training_error_never_increases(table):
    model = train_gbt(table, GbtConfig(n_trees=25, max_depth=2, lr=0.3, min_leaf=2))
    mse = np.array(model.training_mse)
    assert len(mse) == 25
    assert np.all(np.diff(mse) <= 1e-12)


def test_depth_limit(table):
    model = train_gbt(table, GbtConfig(n_trees=3, max_depth=2, min_leaf=1))
    assert max(tree.depth for tree in model.trees) <= 2


def test_zero_trees_predicts_mean(table):
    model = train_gbt(table, GbtConfig(n_trees=0))
    np.testing.assert_allclose(predict_gbt(model, table), table.target_values().mean())


def test_empty_training_set():
    with pytest.raises(DataError):
        train_gbt_matrix(np.zeros((0, 2)), np.zeros(0), GbtConfig(), ["a", "b"])


def test_features_exclude_target(table):
    _, names = feature_matrix(table)
    assert names == ["Hour", "Light_Presence", "AAHT", "Segment_Length"]


def test_prediction_requires_trained_features(table):
    model = train_gbt(table, GbtConfig(n_trees=2))
    model.feature_names = model.feature_names + ["Speed_Limit"]
    with pytest.raises(SchemaError):
        predict_gbt(model, table)


def test_json_round_trip(table, tmp_path):
    model = train_gbt(table, GbtConfig(n_trees=4, max_depth=3, min_leaf=2))
    restored = load_gbt(save_gbt(model, tmp_path / "gbt.json"))
    assert isinstance(restored, TreeEnsemble)
    np.testing.assert_array_equal(predict_gbt(restored, table), predict_gbt(model, table))


class TestGridSearch:
    def test_singleton_grid_returns_that_cell(self, table):
        best, cv = grid_search(table, {"max_depth": [2], "n_trees": [3]}, folds=3, seed=0)
        assert (best.max_depth, best.n_trees) == (2, 3)
        assert list(cv.columns) == ["max_depth", "n_trees", "mean_mse", "std_mse"]
        assert len(cv) == 1

    def test_picks_lowest_mean_error(self, table):
        best, cv = grid_search(table, {"n_trees": [0, 20], "lr": [0.1]}, folds=4, seed=1)
        assert len(cv) == 2
        assert best.n_trees == int(cv.loc[cv["mean_mse"].idxmin(), "n_trees"])

    def test_base_supplies_other_settings(self, table):
        best, _ = grid_search(table, {"n_trees": [2]}, folds=2, seed=0, base=GbtConfig(min_leaf=7))
        assert best.min_leaf == 7

    def test_invalid_cell(self, table):
        with pytest.raises(ConfigError):
            grid_search(table, {"max_depth": [0]}, folds=2, seed=0)

    def test_empty_grid(self, table):
        with pytest.raises(ConfigError):
            grid_search(table, {}, folds=2, seed=0)

    def test_too_few_rows(self, table):
        with pytest.raises(DataError):
            grid_search(table.take([0, 1]), {"n_trees": [1]}, folds=3, seed=0)
