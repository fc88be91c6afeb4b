import numpy as np
import pytest

from crashsynth.autodiff import Tensor, grad_check
from crashsynth.config import DiffusionConfig
from crashsynth.diffusion import (DiffusionModel, NoiseSchedule, denoise, diffusion_loss, load_diffusion, perturb,
                                  sample, save_diffusion, time_features, train_diffusion)
from crashsynth.errors import DataError, ShapeError


class GaussianOracle:
    """Exact noise predictor for standard-normal standardized latents."""

    def __init__(self, latent_dim, mean=0.0, std=1.0):
        self.latent_dim = latent_dim
        self.schedule = NoiseSchedule(0.002, 20.0)
        self.mean = mean
        self.std = std

    def predict_noise(self, z_t, sigma):
        z_t = np.asarray(z_t.values if isinstance(z_t, Tensor) else z_t)
        return Tensor(z_t * sigma / (sigma ** 2 + 1.0))

    def destandardize(self, latents):
        return latents * self.std + self.mean


def test_schedule_grid_is_decreasing_and_ends_at_zero():
    grid = NoiseSchedule(0.002, 20.0).grid(50)
    assert len(grid) == 51
    assert grid[0] == pytest.approx(20.0)
    assert grid[-2] == pytest.approx(0.002)
    assert grid[-1] == 0.0
    assert np.all(np.diff(grid) < 0)


def test_sampled_sigma_stays_in_range():
    sigma = NoiseSchedule(0.002, 20.0).sample_sigma(np.random.default_rng(0), 1000)
    assert sigma.min() >= 0.002 and sigma.max() <= 20.0


def test_time_features_shape():
    features = time_features(np.array([0.1, 1.0, 10.0]), 8)
    assert features.shape == (3, 16)
    np.testing.assert_allclose(features[1, :8], 1.0)


def test_perturb_adds_scaled_noise():
    z0 = np.ones((4, 3))
    z_t, eps = perturb(z0, np.array([0.0, 1.0, 2.0, 3.0]), 0)
    np.testing.assert_allclose(z_t, z0 + np.array([0.0, 1.0, 2.0, 3.0])[:, None] * eps)
    np.testing.assert_array_equal(z_t[0], z0[0])


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradient(seed):
    model = DiffusionModel(3, DiffusionConfig(d_hidden=4, n_frequencies=2), seed=seed)
    z0 = np.random.default_rng(seed).normal(size=(5, 3))
    assert grad_check(lambda: diffusion_loss(model, z0, 100 + seed), model.parameters()).passed


def test_loss_rejects_empty_batch():
    model = DiffusionModel(3, DiffusionConfig(d_hidden=4, n_frequencies=2))
    with pytest.raises(DataError):
        diffusion_loss(model, np.zeros((0, 3)), 0)


def test_denoiser_checks_width():
    model = DiffusionModel(3, DiffusionConfig(d_hidden=4, n_frequencies=2))
    with pytest.raises(ShapeError):
        denoise(model, np.zeros((2, 4)), 1.0)
    assert denoise(model, np.zeros(3), 1.0).shape == (1, 3)


@pytest.mark.parametrize("deterministic", [True, False])
def test_sampler_recovers_oracle_distribution(deterministic):
    oracle = GaussianOracle(2, mean=5.0, std=2.0)
    samples = sample(oracle, 4000, steps=200, seed=0, deterministic=deterministic)
    assert samples.shape == (4000, 2)
    np.testing.assert_allclose(samples.mean(axis=0), 5.0, atol=0.25)
    np.testing.assert_allclose(samples.std(axis=0), 2.0, atol=0.3)


def test_sampler_is_seeded():
    oracle = GaussianOracle(3)
    np.testing.assert_array_equal(sample(oracle, 10, 5, seed=4), sample(oracle, 10, 5, seed=4))


def test_sampler_edge_cases():
    oracle = GaussianOracle(3)
    assert sample(oracle, 0, 5, seed=0).shape == (0, 3)
    assert np.all(np.isfinite(sample(oracle, 7, 1, seed=0)))
    with pytest.raises(ValueError):
        sample(oracle, 5, 0, seed=0)


def test_training_records_every_epoch(tiny_diffusion_config):
    latents = np.random.default_rng(0).normal(3.0, 2.0, size=(40, 6))
    model, history = train_diffusion(latents, tiny_diffusion_config, seed=0)
    assert len(history) == tiny_diffusion_config.epochs
    assert all(np.isfinite(history.losses))
    np.testing.assert_allclose(model.latent_mean, latents.mean(axis=0))
    assert sample(model, 8, tiny_diffusion_config.steps, seed=1).shape == (8, 6)


def test_training_rejects_empty():
    with pytest.raises(DataError):
        train_diffusion(np.zeros((0, 4)), DiffusionConfig(), seed=0)


def test_constant_latent_coordinate_keeps_unit_scale(tiny_diffusion_config):
    latents = np.random.default_rng(0).normal(size=(30, 3))
    latents[:, 1] = 4.0
    model, _ = train_diffusion(latents, tiny_diffusion_config, seed=0)
    assert model.latent_std[1] == 1.0


def test_checkpoint_round_trip(schema, tiny_diffusion_config, tmp_path):
    latents = np.random.default_rng(0).normal(size=(30, 20))
    model, history = train_diffusion(latents, tiny_diffusion_config, seed=0)
    path = save_diffusion(model, tmp_path / "diffusion.ckpt", schema, history)
    restored = load_diffusion(path, latent_dim=20, schema=schema)
    np.testing.assert_array_equal(sample(model, 5, 3, seed=2), sample(restored, 5, 3, seed=2))
    with pytest.raises(ShapeError):
        load_diffusion(path, latent_dim=24)


def test_perturbation_statistics():
    z0 = np.full((10000, 1), 1.5)
    z_t, _ = perturb(z0, 2.0, np.random.default_rng(7))
    assert abs(z_t.mean() - 1.5) <= 3.0 * 2.0 / np.sqrt(10000)
    # standard error of a normal sample variance is sigma^2 * sqrt(2 / (n - 1))
    assert abs(z_t.var() - 4.0) <= 3.0 * 4.0 * np.sqrt(2.0 / 9999)


@pytest.mark.slow
def test_constant_latents_concentrate_samples():
    centre = np.array([5.0, -5.0, 5.0, -5.0])
    latents = np.tile(centre, (200, 1))
    config = DiffusionConfig(d_hidden=32, n_frequencies=8, epochs=60, batch_size=50, lr=3e-3)
    model, _ = train_diffusion(latents, config, seed=0)
    samples = sample(model, 500, steps=50, seed=1, deterministic=True)
    assert np.linalg.norm(samples.mean(axis=0) - centre) <= 0.1 * np.linalg.norm(centre)


@pytest.mark.slow
def test_samples_cover_every_mixture_mode():
    rng = np.random.default_rng(0)
    centres = np.array([[4.0, 4.0], [4.0, -4.0], [-4.0, 4.0], [-4.0, -4.0]])
    latents = centres[rng.integers(0, 4, size=2000)] + rng.normal(0.0, 0.5, size=(2000, 2))
    config = DiffusionConfig(d_hidden=64, n_frequencies=8, epochs=80, batch_size=100, lr=2e-3)
    model, _ = train_diffusion(latents, config, seed=0)

    samples = sample(model, 2000, steps=50, seed=1)

    nearest = np.argmin(np.linalg.norm(samples[:, None, :] - centres[None, :, :], axis=2), axis=1)
    shares = np.bincount(nearest, minlength=4) / len(samples)
    assert np.all(shares >= 0.10), f"mode shares {np.round(shares, 3).tolist()}"
