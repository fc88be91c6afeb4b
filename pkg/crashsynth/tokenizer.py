"""
Feature tokenization: every column of an encoded row becomes one d-wide token,
and the symmetric detokenizer maps tokens back to column values.
"""

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .autodiff import (Module, Tensor, add, as_tensor, concat, log_softmax_rows, matmul, mul, reshape,
                       softmax_rows, sum_, uniform_init)
from .data_schema import EncodedMatrix, TableSchema, encoding_layout
from .errors import SchemaError, ShapeError


@dataclass
class Detokenized:
    """Detokenizer output for a batch of reconstructed embeddings."""
    continuous: Tensor
    logits: List[Tensor]
    log_probabilities: List[Tensor]
    probabilities: List[Tensor]

    def encoded_values(self) -> np.ndarray:
        """Reconstruction in encoded space: real columns followed by probability spans."""
        blocks = [self.continuous.values] + [p.values for p in self.probabilities]
        return np.concatenate(blocks, axis=-1)


class FeatureTokenizer(Module):
    """
    Per-column linear embeddings and their inverse maps.

    Continuous column i embeds as ``x_i * w_i + b_i``; discrete column i embeds
    as ``one_hot @ W_i + b_i``. Tokens follow the encoding layout: continuous
    columns first, then discrete ones.

    Args:
        schema: Fitted schema whose model columns are tokenized
        d: Token width
        rng: Generator used for the uniform initialisation in ±1/sqrt(d)
    """

    def __init__(self, schema: TableSchema, d: int, rng: np.random.Generator):
        self.schema = schema.without_provenance()
        self.d = d
        self.layout = encoding_layout(self.schema)
        self.n_continuous = len(self.schema.continuous_columns)
        self.cardinalities = [c.cardinality for c in self.schema.discrete_columns]
        bound = 1.0 / np.sqrt(d)
        mc = self.n_continuous

        self.con_weight = uniform_init(rng, (mc, d), bound)
        self.con_bias = uniform_init(rng, (mc, d), bound)
        self.dis_weights = [uniform_init(rng, (c, d), bound) for c in self.cardinalities]
        self.dis_biases = [uniform_init(rng, (d,), bound) for _ in self.cardinalities]

        self.out_con_weight = uniform_init(rng, (mc, d), bound)
        self.out_con_bias = uniform_init(rng, (mc,), bound)
        self.out_dis_weights = [uniform_init(rng, (d, c), bound) for c in self.cardinalities]
        self.out_dis_biases = [uniform_init(rng, (c,), bound) for c in self.cardinalities]

    @property
    def n_tokens(self) -> int:
        return self.n_continuous + len(self.cardinalities)

    @property
    def width(self) -> int:
        return self.layout[-1].stop if self.layout else 0

    def _as_batch(self, encoded) -> Tuple[np.ndarray, bool]:
        if isinstance(encoded, EncodedMatrix):
            if tuple(encoded.layout) != tuple(self.layout):
                raise SchemaError("Encoded matrix layout does not match the tokenizer's schema")
            values = encoded.values
        else:
            values = np.asarray(encoded, dtype=np.float64)
        single = values.ndim == 1
        if single:
            values = values[None, :]
        if values.ndim != 2 or values.shape[1] != self.width:
            raise SchemaError(f"Encoded rows have width {values.shape[-1]}, tokenizer expects {self.width}")
        return values, single

    def tokenize(self, encoded) -> Tensor:
        """
        Embed encoded rows.

        Args:
            encoded: EncodedMatrix, a (B, width) array, or a single (width,) row

        Returns:
            Tensor of shape (B, M, d), or (M, d) for a single row

        Raises:
            SchemaError: If the row width or layout does not match
        """
        values, single = self._as_batch(encoded)
        batch = values.shape[0]
        mc = self.n_continuous
        tokens = []
        if mc:
            x = as_tensor(values[:, :mc, None])
            tokens.append(add(mul(x, self.con_weight), self.con_bias))
        for span, weight, bias in zip(self.layout[mc:], self.dis_weights, self.dis_biases):
            one_hot = as_tensor(values[:, span.start:span.stop])
            tokens.append(reshape(add(matmul(one_hot, weight), bias), (batch, 1, self.d)))
        embedding = concat(tokens, axis=1)
        return embedding[0] if single else embedding

    def detokenize(self, embedding: Tensor) -> Detokenized:
        """
        Map reconstructed tokens back to column values.

        Args:
            embedding: Tensor of shape (B, M, d) or (M, d)

        Returns:
            Detokenized with continuous outputs (B, Mc) and per-discrete-column
            logits, log-probabilities and probabilities (B, C_i)

        Raises:
            ShapeError: If the token grid is not M x d
        """
        embedding = as_tensor(embedding)
        if embedding.ndim == 2:
            embedding = reshape(embedding, (1,) + embedding.shape)
        if embedding.ndim != 3 or embedding.shape[1:] != (self.n_tokens, self.d):
            raise ShapeError(f"detokenize: expected (B, {self.n_tokens}, {self.d}), got {embedding.shape}")
        mc = self.n_continuous
        continuous = add(sum_(mul(embedding[:, :mc, :], self.out_con_weight), axis=-1), self.out_con_bias)
        logits, log_probs, probs = [], [], []
        for i, (weight, bias) in enumerate(zip(self.out_dis_weights, self.out_dis_biases)):
            z = add(matmul(embedding[:, mc + i, :], weight), bias)
            logits.append(z)
            log_probs.append(log_softmax_rows(z))
            probs.append(softmax_rows(z))
        return Detokenized(continuous, logits, log_probs, probs)


def hard_assignment(probabilities: np.ndarray) -> np.ndarray:
    """Argmax category index per row; the lowest index wins ties."""
    return np.argmax(np.asarray(probabilities), axis=-1)

