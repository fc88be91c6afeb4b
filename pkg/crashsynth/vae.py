"""
Transformer variational autoencoder over column tokens.

Rows are tokenized into an M x d grid, passed through two pre-norm transformer
blocks, projected per token to a diagonal Gaussian posterior, and decoded by a
second pair of blocks followed by the detokenizer.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from .autodiff import (Adam, LayerNorm, Linear, Module, Tensor, add, as_tensor, backward, exp, log_, matmul,
                       mul, no_grad, relu, reshape, scale, softmax_rows, sum_, sum_squares, transpose)
from .checkpoint import read_checkpoint, write_checkpoint
from .config import VaeConfig
from .data_schema import EncodedMatrix, Table, TableSchema, encode
from .errors import ConfigError, DataError, NumericalError, ShapeError
from .tokenizer import Detokenized, FeatureTokenizer
from .validators import require_same_schema

log = logging.getLogger(__name__)

INFERENCE_BATCH = 512


class MultiHeadSelfAttention(Module):
    """Scaled dot-product attention across the column-token axis."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ConfigError(f"Token width {d} is not divisible by {heads} attention heads")
        self.heads = heads
        self.query = Linear(d, d, rng)
        self.key = Linear(d, d, rng)
        self.value = Linear(d, d, rng)
        self.output = Linear(d, d, rng)
        self.last_weights: Optional[np.ndarray] = None

    def __call__(self, x: Tensor) -> Tensor:
        batch, m, d = x.shape
        dh = d // self.heads

        def split_heads(t):
            return transpose(reshape(t, (batch, m, self.heads, dh)), (0, 2, 1, 3))

        q, k, v = split_heads(self.query(x)), split_heads(self.key(x)), split_heads(self.value(x))
        scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        weights = softmax_rows(scores)
        self.last_weights = weights.values
        context = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (batch, m, d))
        return self.output(context)


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm block: x + attn(norm(x)), then h + ffn(norm(h))."""

    def __init__(self, d: int, heads: int, hidden: int, rng: np.random.Generator):
        self.attention_norm = LayerNorm(d)
        self.attention = MultiHeadSelfAttention(d, heads, rng)
        self.ffn_norm = LayerNorm(d)
        self.ffn = FeedForward(d, hidden, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = add(x, self.attention(self.attention_norm(x)))
        return add(h, self.ffn(self.ffn_norm(h)))


@dataclass
class VaeOutput:
    mu: Tensor
    sigma: Tensor
    z: Tensor
    reconstruction: Detokenized


@dataclass
class VaeLoss:
    total: Tensor
    reconstruction: Tensor
    kl: Tensor


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    reconstruction: float
    kl: float
    beta: float


@dataclass
class TrainingLog:
    records: List[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def losses(self) -> List[float]:
        return [r.loss for r in self.records]

    @property
    def final_loss(self) -> float:
        return self.records[-1].loss if self.records else float("nan")

    def to_dict(self) -> dict:
        return {"epochs": [vars(r) for r in self.records]}


class VaeModel(Module):
    """
    Tokenizer, two encoder blocks, per-token mu/logvar heads, two decoder blocks.

    Args:
        schema: Fitted schema of the modelled table
        config: VAE hyperparameters
        seed: Initialisation seed
    """

    def __init__(self, schema: TableSchema, config: VaeConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        d = config.d
        hidden = config.ffn_multiplier * d
        self.config = config
        self.tokenizer = FeatureTokenizer(schema, d, rng)
        self.encoder = [TransformerBlock(d, config.heads, hidden, rng) for _ in range(2)]
        self.mu_head = Linear(d, d, rng)
        self.logvar_head = Linear(d, d, rng)
        self.decoder = [TransformerBlock(d, config.heads, hidden, rng) for _ in range(2)]
        self.beta = config.beta

    @property
    def schema(self) -> TableSchema:
        return self.tokenizer.schema

    @property
    def n_tokens(self) -> int:
        return self.tokenizer.n_tokens

    @property
    def d(self) -> int:
        return self.tokenizer.d

    @property
    def latent_dim(self) -> int:
        return self.n_tokens * self.d

    def attention_weights(self) -> List[np.ndarray]:
        """Attention weights of every block from the most recent forward pass."""
        return [b.attention.last_weights for b in self.encoder + self.decoder]

    def encode(self, encoded) -> Tuple[Tensor, Tensor]:
        """
        Posterior parameters per token.

        Args:
            encoded: Encoded rows (B, width), or one row

        Returns:
            (mu, sigma), each (B, M, d) or (M, d); sigma = exp(0.5 * logvar) > 0
        """
        tokens = self.tokenizer.tokenize(encoded)
        single = tokens.ndim == 2
        h = reshape(tokens, (1,) + tokens.shape) if single else tokens
        for block in self.encoder:
            h = block(h)
        mu = self.mu_head(h)
        sigma = exp(scale(self.logvar_head(h), 0.5))
        if single:
            return mu[0], sigma[0]
        return mu, sigma

    def decode(self, z) -> Tensor:
        """
        Reconstructed token grid for latent grids.

        Raises:
            ShapeError: If ``z`` is not (B, M, d) or (M, d)
        """
        z = as_tensor(z)
        single = z.ndim == 2
        h = reshape(z, (1,) + z.shape) if single else z
        if h.ndim != 3 or h.shape[1:] != (self.n_tokens, self.d):
            raise ShapeError(f"decode: expected latent grid ({self.n_tokens}, {self.d}), got {z.shape}")
        for block in self.decoder:
            h = block(h)
        return h[0] if single else h

    def forward(self, encoded, rng: np.random.Generator) -> VaeOutput:
        mu, sigma = self.encode(encoded)
        z = reparameterize(mu, sigma, rng)
        return VaeOutput(mu, sigma, z, self.tokenizer.detokenize(self.decode(z)))

    def reconstruct(self, encoded) -> np.ndarray:
        """Encoded-space reconstruction through the posterior mean."""
        values = encoded.values if isinstance(encoded, EncodedMatrix) else np.asarray(encoded, dtype=np.float64)
        out = []
        with no_grad():
            for start in range(0, len(values), INFERENCE_BATCH):
                mu, _ = self.encode(values[start:start + INFERENCE_BATCH])
                out.append(self.tokenizer.detokenize(self.decode(mu)).encoded_values())
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.tokenizer.width))

    def decode_latents(self, latents: np.ndarray) -> np.ndarray:
        """
        Decode flattened latents to encoded rows (reals then probability spans).

        Raises:
            ShapeError: If the latent width is not M * d
        """
        latents = np.asarray(latents, dtype=np.float64)
        if latents.ndim != 2 or latents.shape[1] != self.latent_dim:
            raise ShapeError(f"decode_latents: expected width {self.latent_dim}, got shape {latents.shape}")
        out = []
        with no_grad():
            for start in range(0, len(latents), INFERENCE_BATCH):
                grid = unflatten(latents[start:start + INFERENCE_BATCH], self.n_tokens, self.d)
                out.append(self.tokenizer.detokenize(self.decode(grid)).encoded_values())
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.tokenizer.width))


def reparameterize(mu: Tensor, sigma: Tensor, rng) -> Tensor:
    """
    Z = mu + sigma * eps with eps ~ N(0, I); eps is a constant of the graph.

    Args:
        mu: Posterior mean
        sigma: Posterior standard deviation, same shape
        rng: Generator or integer seed
    """
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    if mu.shape != sigma.shape:
        raise ShapeError(f"reparameterize: mu {mu.shape} and sigma {sigma.shape} differ")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    eps = rng.standard_normal(mu.shape)
    return add(mu, mul(sigma, as_tensor(eps)))


def kl_divergence(mu, sigma) -> Tensor:
    """Sum over all entries of KL(N(mu, sigma^2) || N(0, 1))."""
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    total = add(add(sum_squares(mu), sum_squares(sigma)), scale(sum_(log_(sigma)), -2.0))
    return scale(add(total, -float(mu.size)), 0.5)


def vae_loss(encoded, reconstruction: Detokenized, mu: Tensor, sigma: Tensor, beta: float) -> VaeLoss:
    """
    Reconstruction plus beta-weighted KL, summed over columns and averaged over the batch.

    Reconstruction is squared error on standardized reals plus cross-entropy
    of the one-hot spans against the detokenized distributions.
    """
    values = encoded.values if isinstance(encoded, EncodedMatrix) else np.asarray(encoded, dtype=np.float64)
    if values.ndim == 1:
        values = values[None, :]
    batch = values.shape[0]
    mc = reconstruction.continuous.shape[-1]
    recon = sum_squares(add(reconstruction.continuous, as_tensor(-values[:, :mc])))
    start = mc
    for log_p in reconstruction.log_probabilities:
        width = log_p.shape[-1]
        target = as_tensor(values[:, start:start + width])
        recon = add(recon, scale(sum_(mul(target, log_p)), -1.0))
        start += width
    recon = scale(recon, 1.0 / batch)
    kl = scale(kl_divergence(mu, sigma), 1.0 / batch)
    return VaeLoss(add(recon, scale(kl, beta)), recon, kl)


def flatten(grid: np.ndarray) -> np.ndarray:
    """(n, M, d) latent grids to (n, M*d) vectors."""
    grid = np.asarray(grid)
    return grid.reshape(grid.shape[0], -1)


def unflatten(latents: np.ndarray, n_tokens: int, d: int) -> np.ndarray:
    latents = np.asarray(latents)
    return latents.reshape(latents.shape[0], n_tokens, d)


def train_vae(table: Table, config: VaeConfig, seed: int) -> Tuple[VaeModel, TrainingLog]:
    """
    Fit the VAE with Adam and an optional adaptive KL weight.

    With ``beta_schedule = "adaptive"`` the KL weight halves whenever the epoch
    reconstruction loss fails to improve for ``beta_patience`` epochs, down to
    ``beta_min``.

    Args:
        table: Rows to model; its schema is fitted on them when not already fitted
        config: Hyperparameters
        seed: Seed for initialisation, shuffling and reparameterization noise

    Returns:
        (model, per-epoch training log)

    Raises:
        DataError: If the table is empty
        NumericalError: If the loss stops being finite, naming the epoch
    """
    if len(table) == 0:
        raise DataError("Cannot train the VAE on an empty table")
    if not table.schema.is_fitted:
        table = table.with_schema(table.schema.fit(table.frame))
    values = encode(table.with_schema(table.schema.without_provenance())).values
    model = VaeModel(table.schema, config, seed)
    optimizer = Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng([seed, 1])
    history = TrainingLog()
    beta = config.beta
    best_recon, stale = np.inf, 0

    for epoch in tqdm(range(config.epochs), desc="train-vae", leave=False, disable=None):
        order = rng.permutation(len(values))
        totals = np.zeros(3)
        try:
            for start in range(0, len(order), config.batch_size):
                batch = values[order[start:start + config.batch_size]]
                output = model.forward(batch, rng)
                loss = vae_loss(batch, output.reconstruction, output.mu, output.sigma, beta)
                optimizer.zero_grad()
                backward(loss.total)
                optimizer.step()
                totals += len(batch) * np.array([loss.total.item(), loss.reconstruction.item(), loss.kl.item()])
        except NumericalError as e:
            raise NumericalError(f"VAE training diverged at epoch {epoch}: {e}") from e
        total, recon, kl = totals / len(values)
        history.records.append(EpochRecord(epoch, float(total), float(recon), float(kl), beta))

        if config.beta_schedule == "adaptive":
            if recon < best_recon:
                best_recon, stale = recon, 0
            else:
                stale += 1
                if stale >= config.beta_patience:
                    beta = max(beta / 2.0, config.beta_min)
                    stale = 0
                    log.debug("Epoch %d: beta lowered to %.2e", epoch, beta)
    model.beta = beta
    log.info("Trained VAE for %d epochs, final loss %.4f", config.epochs, history.final_loss)
    return model, history


def extract_latents(model: VaeModel, table) -> np.ndarray:
    """
    Flattened posterior means, one (M*d)-vector per row.

    Args:
        model: Trained VAE
        table: Table or encoded rows
    """
    if isinstance(table, Table):
        table = encode_for(model, table)
    values = table.values if isinstance(table, EncodedMatrix) else np.asarray(table, dtype=np.float64)
    out = []
    with no_grad():
        for start in range(0, len(values), INFERENCE_BATCH):
            mu, _ = model.encode(values[start:start + INFERENCE_BATCH])
            out.append(flatten(mu.values))
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.latent_dim))


def encode_for(model: VaeModel, table: Table) -> EncodedMatrix:
    """Encode a table with the model's fitted schema (provenance dropped)."""
    require_same_schema(model.schema, table.schema.without_provenance())
    return encode(Table(model.schema, table.frame[model.schema.names]))


def save_vae(model: VaeModel, path: Path, training_log: Optional[TrainingLog] = None) -> Path:
    extras = {"beta": model.beta, "n_tokens": model.n_tokens, "d": model.d}
    if training_log is not None:
        extras["losses"] = training_log.losses
    return write_checkpoint(path, "vae", model.schema, model.state_dict(),
                            config=model.config.model_dump(), extras=extras)


def load_vae(path: Path, schema: Optional[TableSchema] = None) -> VaeModel:
    """
    Restore a VAE checkpoint.

    Args:
        path: Checkpoint file
        schema: When given, the checkpoint must have been trained on it

    Raises:
        SchemaError: On fingerprint mismatch
        ArtifactError: On a malformed or foreign checkpoint
    """
    checkpoint = read_checkpoint(path, expected_kind="vae")
    if schema is not None:
        checkpoint.require_schema(schema)
    model = VaeModel(checkpoint.schema, VaeConfig.model_validate(checkpoint.config))
    model.load_state_dict(checkpoint.tensors)
    model.beta = checkpoint.extras.get("beta", model.beta)
    return model
