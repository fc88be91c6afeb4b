from dataclasses import replace

import numpy as np
import pytest

from conftest import small_process, small_spec
from crashsynth.config import ZipConfig
from crashsynth.errors import ConvergenceError, DataError
from crashsynth.simulator import ZipProcess, simulate_zip_table
from crashsynth.zip_model import (design_matrix, expected_count, fit_zip, fit_zip_matrix, load_zip, log_likelihood,
                                  save_zip, score, zip_components, zip_predict)


@pytest.fixture(scope="module")
def fitted():
    table = simulate_zip_table(2000, small_spec(), small_process(), seed=3)
    return table, fit_zip(table, ZipConfig())


def test_expected_count_examples():
    np.testing.assert_allclose(expected_count([0.5, 1.0, 0.0], [2.0, 3.0, 1.5]), [1.0, 0.0, 1.5])


def test_score_matches_numerical_gradient():
    rng = np.random.default_rng(0)
    x = design_matrix(rng.normal(size=(50, 2)))
    y = rng.poisson(1.5, size=50) * (rng.random(50) > 0.3)
    gamma, beta = rng.normal(scale=0.3, size=3), rng.normal(scale=0.3, size=3)
    theta = np.concatenate([gamma, beta])
    numeric = np.empty(6)
    for j in range(6):
        up, down = theta.copy(), theta.copy()
        up[j] += 1e-6
        down[j] -= 1e-6
        numeric[j] = (log_likelihood(x, y, up[:3], up[3:]) - log_likelihood(x, y, down[:3], down[3:])) / 2e-6
    np.testing.assert_allclose(score(x, y, gamma, beta), numeric, rtol=1e-5, atol=1e-5)


def test_trajectory_never_decreases(fitted):
    _, params = fitted
    trajectory = np.array(params.trajectory)
    assert np.all(np.diff(trajectory) >= -1e-9 * np.abs(trajectory[:-1]))
    assert params.log_likelihood >= trajectory[-1]


def test_standard_errors_are_positive(fitted):
    _, params = fitted
    assert params.coefficient_names == ["intercept", "Light_Presence", "AAHT", "Segment_Length", "Lane_Width"]
    assert np.all(params.inflation_se > 0) and np.all(params.rate_se > 0)


def test_predictions(fitted):
    table, params = fitted
    p, lam = zip_components(params, table)
    predictions = zip_predict(params, table)
    assert np.all((p >= 0) & (p <= 1)) and np.all(lam > 0)
    np.testing.assert_allclose(predictions, (1 - p) * lam)
    assert len(zip_predict(params, table.take([]))) == 0


def test_mean_prediction_tracks_target(fitted):
    table, params = fitted
    assert zip_predict(params, table).mean() == pytest.approx(table.target_values().mean(), rel=0.05)


def test_json_round_trip(fitted, tmp_path):
    table, params = fitted
    restored = load_zip(save_zip(params, tmp_path / "zip.json"))
    np.testing.assert_allclose(restored.rate, params.rate)
    np.testing.assert_allclose(restored.inflation_se, params.inflation_se)
    np.testing.assert_allclose(zip_predict(restored, table), zip_predict(params, table))


def test_all_zero_target():
    with pytest.raises(DataError, match="All targets are zero"):
        fit_zip_matrix(np.zeros((10, 1)), np.zeros(10), ZipConfig())


@pytest.mark.parametrize("y", [np.array([0.0, -1.0, 2.0]), np.array([0.0, 1.5, 2.0]), np.zeros(0)])
def test_invalid_counts(y):
    with pytest.raises(DataError):
        fit_zip_matrix(np.zeros((len(y), 1)), y, ZipConfig())


def test_iteration_cap_raises_with_trajectory(simulated):
    z = np.zeros((len(simulated), 0))
    with pytest.raises(ConvergenceError) as raised:
        fit_zip_matrix(z, simulated.target_values(), ZipConfig(max_iter=1, tol=1e-15))
    assert len(raised.value.trajectory) == 2


@pytest.mark.slow
def test_pure_poisson_drives_inflation_to_zero():
    process = ZipProcess(inflation_intercept=-40.0, rate_intercept=float(np.log(2.0)))
    table = simulate_zip_table(10000, small_spec(), process, seed=5)
    params = fit_zip(table, ZipConfig())
    p, lam = zip_components(params, table)
    assert p.mean() <= 0.05
    assert 1.9 <= lam.mean() <= 2.1


@pytest.mark.slow
def test_recovers_generating_coefficients():
    spec, process = small_spec(), replace(small_process(), hour_cycle=0.0, interaction=0.0)
    table = simulate_zip_table(10000, spec, process, seed=8)
    params = fit_zip(table, ZipConfig())
    names = params.feature_names
    true_inflation = np.array([process.inflation_intercept] + [process.inflation_weights.get(n, 0.0) for n in names])
    true_rate = np.array([process.rate_intercept] + [process.rate_weights.get(n, 0.0) for n in names])
    assert np.all(np.abs(params.inflation - true_inflation) <= 3 * params.inflation_se)
    assert np.all(np.abs(params.rate - true_rate) <= 3 * params.rate_se)
