"""
Score-based diffusion over flattened VAE latents.

Variance-exploding forward process with sigma(t) = t, a five-layer SiLU
denoiser predicting the injected noise, and Euler-Maruyama integration of the
reverse-time dynamics over a geometric noise grid.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from .autodiff import Adam, Linear, Module, Tensor, add, as_tensor, backward, mul, no_grad, scale, silu, sum_squares
from .checkpoint import read_checkpoint, write_checkpoint
from .config import DiffusionConfig
from .data_schema import TableSchema
from .errors import DataError, NumericalError, ShapeError

log = logging.getLogger(__name__)

SAMPLE_BATCH = 1024


@dataclass(frozen=True)
class NoiseSchedule:
    """Identity schedule sigma(t) = t on [sigma_min, sigma_max]; ln sigma uniform during training."""
    sigma_min: float = 0.002
    sigma_max: float = 20.0

    def sigma(self, t) -> np.ndarray:
        return np.asarray(t, dtype=np.float64)

    def sample_sigma(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.exp(rng.uniform(np.log(self.sigma_min), np.log(self.sigma_max), size=n))

    def grid(self, steps: int) -> np.ndarray:
        """Decreasing noise levels from sigma_max to sigma_min, then 0."""
        levels = np.geomspace(self.sigma_max, self.sigma_min, steps) if steps > 1 else np.array([self.sigma_max])
        return np.append(levels, 0.0)


def time_features(sigma: np.ndarray, n_frequencies: int) -> np.ndarray:
    """Sinusoidal features of ln sigma: n_frequencies cosine/sine pairs per row."""
    frequencies = np.exp(-np.log(10000.0) * np.arange(n_frequencies) / n_frequencies)
    angles = np.log(np.asarray(sigma, dtype=np.float64))[:, None] * frequencies[None, :]
    return np.concatenate([np.cos(angles), np.sin(angles)], axis=1)


class DenoiserMlp(Module):
    """
    Noise predictor: FC_in plus the time embedding, three SiLU layers, FC_out.

    Args:
        latent_dim: Width of the flattened latent, M * d
        d_hidden: Hidden width; the inner two layers are twice as wide
        n_frequencies: Sinusoidal frequency pairs of the time embedding
        rng: Initialisation generator
    """

    def __init__(self, latent_dim: int, d_hidden: int, n_frequencies: int, rng: np.random.Generator):
        self.latent_dim = latent_dim
        self.n_frequencies = n_frequencies
        self.fc_in = Linear(latent_dim, d_hidden, rng)
        self.time_embedding = Linear(2 * n_frequencies, d_hidden, rng)
        self.fc1 = Linear(d_hidden, 2 * d_hidden, rng)
        self.fc2 = Linear(2 * d_hidden, 2 * d_hidden, rng)
        self.fc3 = Linear(2 * d_hidden, d_hidden, rng)
        self.fc_out = Linear(d_hidden, latent_dim, rng)

    def __call__(self, z, sigma: np.ndarray) -> Tensor:
        z = as_tensor(z)
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ShapeError(f"denoiser: expected (B, {self.latent_dim}), got {z.shape}")
        t_emb = self.time_embedding(as_tensor(time_features(sigma, self.n_frequencies)))
        h = add(self.fc_in(z), t_emb)
        h = silu(self.fc1(h))
        h = silu(self.fc2(h))
        h = silu(self.fc3(h))
        return self.fc_out(h)


class DiffusionModel(Module):
    """
    Denoiser, schedule and the per-coordinate latent standardization.

    The denoiser works on standardized latents; its input is scaled by
    ``1 / sqrt(sigma^2 + 1)``.
    """

    def __init__(self, latent_dim: int, config: DiffusionConfig, seed: int = 0):
        self.config = config
        self.latent_dim = latent_dim
        self.schedule = NoiseSchedule(config.sigma_min, config.sigma_max)
        self.denoiser = DenoiserMlp(latent_dim, config.d_hidden, config.n_frequencies,
                                    np.random.default_rng(seed))
        self.latent_mean = np.zeros(latent_dim)
        self.latent_std = np.ones(latent_dim)

    def predict_noise(self, z_t, sigma) -> Tensor:
        z_t = as_tensor(z_t)
        sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (z_t.shape[0],))
        c_in = 1.0 / np.sqrt(sigma ** 2 + 1.0)
        return self.denoiser(mul(z_t, as_tensor(c_in[:, None])), sigma)

    def standardize(self, latents: np.ndarray) -> np.ndarray:
        return (np.asarray(latents, dtype=np.float64) - self.latent_mean) / self.latent_std

    def destandardize(self, latents: np.ndarray) -> np.ndarray:
        return np.asarray(latents) * self.latent_std + self.latent_mean


def perturb(z0: np.ndarray, sigma, rng) -> Tuple[np.ndarray, np.ndarray]:
    """
    Forward perturbation z_t = z0 + sigma * eps.

    Args:
        z0: Clean latents (n, L)
        sigma: Scalar or per-row noise level
        rng: Generator or integer seed

    Returns:
        (z_t, eps)
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    z0 = np.asarray(z0, dtype=np.float64)
    eps = rng.standard_normal(z0.shape)
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim == 1:
        sigma = sigma[:, None]
    return z0 + sigma * eps, eps


def denoise(model: DiffusionModel, z_t, sigma) -> np.ndarray:
    """Predicted noise for noisy standardized latents at noise level(s) sigma."""
    with no_grad():
        return model.predict_noise(np.atleast_2d(z_t), sigma).values


def diffusion_loss(model, z0: np.ndarray, rng) -> Tensor:
    """
    Mean over the batch of the coordinate-summed squared noise error.

    Args:
        model: Anything exposing ``schedule`` and ``predict_noise``
        z0: Standardized clean latents (B, L)
        rng: Generator or integer seed
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    z0 = np.asarray(z0, dtype=np.float64)
    if len(z0) == 0:
        raise DataError("diffusion_loss needs a nonempty batch")
    sigma = model.schedule.sample_sigma(rng, len(z0))
    z_t, eps = perturb(z0, sigma, rng)
    predicted = model.predict_noise(z_t, sigma)
    return scale(sum_squares(add(predicted, as_tensor(-eps))), 1.0 / len(z0))


@dataclass
class DiffusionLog:
    losses: List[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.losses)

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def train_diffusion(latents: np.ndarray, config: DiffusionConfig, seed: int) -> Tuple[DiffusionModel, DiffusionLog]:
    """
    Fit the denoiser on standardized latents.

    Args:
        latents: (n, L) flattened VAE latents
        config: Hyperparameters
        seed: Seed for initialisation, batching and noise

    Returns:
        (model, per-epoch mean losses)

    Raises:
        DataError: If there are no latents
        NumericalError: If the loss stops being finite, naming the step
    """
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2 or len(latents) == 0:
        raise DataError(f"train_diffusion needs a nonempty (n, L) matrix, got shape {latents.shape}")
    model = DiffusionModel(latents.shape[1], config, seed)
    model.latent_mean = latents.mean(axis=0)
    std = latents.std(axis=0)
    model.latent_std = np.where(std > 1e-12, std, 1.0)
    data = model.standardize(latents)

    optimizer = Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng([seed, 1])
    history = DiffusionLog()
    step = 0
    for _ in tqdm(range(config.epochs), desc="train-diffusion", leave=False, disable=None):
        order = rng.permutation(len(data))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = data[order[start:start + config.batch_size]]
            try:
                loss = diffusion_loss(model, batch, rng)
                optimizer.zero_grad()
                backward(loss)
                optimizer.step()
            except NumericalError as e:
                raise NumericalError(f"Diffusion training diverged at step {step}: {e}") from e
            total += loss.item() * len(batch)
            step += 1
        history.losses.append(total / len(data))
    log.info("Trained diffusion model for %d epochs (%d steps), final loss %.4f",
             config.epochs, step, history.final_loss)
    return model, history


def sample(model, n: int, steps: int, seed: int, deterministic: bool = False) -> np.ndarray:
    """
    Draw latents by integrating the reverse dynamics from pure noise.

    The score is estimated as -eps_hat / sigma. A stochastic step from sigma to
    sigma' = sigma - delta is ``z - 2 delta eps_hat + sqrt(2 sigma delta) xi``;
    the probability-flow variant drops the noise and halves the drift. The
    final step to sigma = 0 is always noise-free.

    Args:
        model: Trained DiffusionModel (or any object with the same interface)
        n: Number of samples
        steps: Noise levels on the geometric grid, at least 1
        seed: Random seed
        deterministic: Use the probability-flow variant

    Returns:
        (n, L) de-standardized latents
    """
    if steps < 1:
        raise ValueError(f"steps must be at least 1, got {steps}")
    if n == 0:
        return np.zeros((0, model.latent_dim))
    rng = np.random.default_rng(seed)
    levels = model.schedule.grid(steps)
    z = rng.standard_normal((n, model.latent_dim)) * levels[0]
    with no_grad():
        for sigma, next_sigma in zip(levels[:-1], levels[1:]):
            delta = sigma - next_sigma
            eps_hat = np.concatenate([
                model.predict_noise(z[s:s + SAMPLE_BATCH], sigma).values
                for s in range(0, n, SAMPLE_BATCH)
            ])
            if deterministic or next_sigma == 0.0:
                z = z - delta * eps_hat
            else:
                z = z - 2.0 * delta * eps_hat + np.sqrt(2.0 * sigma * delta) * rng.standard_normal(z.shape)
    return model.destandardize(z)


def save_diffusion(model: DiffusionModel, path: Path, schema: TableSchema,
                   history: Optional[DiffusionLog] = None) -> Path:
    tensors = dict(model.state_dict())
    tensors["latent_mean"] = model.latent_mean
    tensors["latent_std"] = model.latent_std
    extras = {"latent_dim": model.latent_dim, "sigma_min": model.schedule.sigma_min,
              "sigma_max": model.schedule.sigma_max}
    if history is not None:
        extras["losses"] = history.losses
    return write_checkpoint(path, "diffusion", schema, tensors, config=model.config.model_dump(), extras=extras)


def load_diffusion(path: Path, latent_dim: Optional[int] = None, schema: Optional[TableSchema] = None) -> DiffusionModel:
    """
    Restore a diffusion checkpoint.

    Args:
        path: Checkpoint file
        latent_dim: When given, must equal the stored M * d
        schema: When given, must match the stored schema fingerprint

    Raises:
        ShapeError: If the latent width differs from the VAE's
        SchemaError: On fingerprint mismatch
    """
    checkpoint = read_checkpoint(path, expected_kind="diffusion")
    stored = int(checkpoint.extras["latent_dim"])
    if latent_dim is not None and latent_dim != stored:
        raise ShapeError(f"Diffusion checkpoint models latents of width {stored}, VAE produces {latent_dim}")
    if schema is not None:
        checkpoint.require_schema(schema)
    model = DiffusionModel(stored, DiffusionConfig.model_validate(checkpoint.config))
    tensors = dict(checkpoint.tensors)
    model.latent_mean = tensors.pop("latent_mean")
    model.latent_std = tensors.pop("latent_std")
    model.load_state_dict(tensors)
    return model
