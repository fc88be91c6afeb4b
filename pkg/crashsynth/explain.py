"""
Shapley-value attribution for fitted crash-frequency predictors.

The value of a coalition S is the mean prediction over the background rows
after the features in S are replaced by the explained row's values.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.special import comb
from tqdm import tqdm

from .config import app_config
from .data_formatter import sanitize_name, write_frame
from .data_schema import Table
from .errors import ConfigError, DataError, SchemaError, ShapeError
from .predictors import feature_matrix

log = logging.getLogger(__name__)

PredictFn = Callable[[np.ndarray], np.ndarray]

# Upper bound on rows passed to the model in one call
EVAL_CHUNK_ROWS = 1 << 18


@dataclass
class AttributionResult:
    """
    Per-row, per-feature Shapley values.

    For every row ``phi.sum() + base_value`` equals the model's prediction.
    ``standard_errors`` is set in sampled mode only.
    """
    phi: np.ndarray
    base_value: float
    mode: str
    feature_names: List[str]
    feature_values: np.ndarray
    predictions: np.ndarray
    n_permutations: Optional[int] = None
    standard_errors: Optional[np.ndarray] = None

    @property
    def n_rows(self) -> int:
        return self.phi.shape[0]

    def importance(self) -> pd.DataFrame:
        """Features ranked by mean |phi|, ties kept in feature order."""
        mean_abs = np.abs(self.phi).mean(axis=0) if self.n_rows else np.zeros(len(self.feature_names))
        frame = pd.DataFrame({"feature": self.feature_names, "mean_abs_phi": mean_abs})
        frame = frame.sort_values("mean_abs_phi", ascending=False, kind="stable").reset_index(drop=True)
        frame.insert(0, "rank", np.arange(1, len(frame) + 1))
        return frame


def _predictor(model) -> PredictFn:
    if hasattr(model, "predict_matrix"):
        return model.predict_matrix
    if callable(model):
        return model
    raise ConfigError(f"Cannot explain a {type(model).__name__}: expected predict_matrix or a callable")


def _as_matrix(values: Union[Table, np.ndarray], model, feature_names: Optional[Sequence[str]]):
    if isinstance(values, Table):
        names = feature_names or getattr(model, "feature_names", None)
        x, names = feature_matrix(values, names)
        return x, list(names)
    x = np.asarray(values, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    names = list(feature_names) if feature_names is not None else [f"x{j}" for j in range(x.shape[1])]
    return x, names


def _coalition_values(predict: PredictFn, row: np.ndarray, background: np.ndarray,
                      membership: np.ndarray) -> np.ndarray:
    """Background-averaged prediction for each coalition (boolean rows of ``membership``)."""
    n_background = len(background)
    per_chunk = max(1, EVAL_CHUNK_ROWS // n_background)
    values = np.empty(len(membership))
    for start in range(0, len(membership), per_chunk):
        block = membership[start:start + per_chunk]
        data = np.where(block[:, None, :], row[None, None, :], background[None, :, :])
        predictions = np.asarray(predict(data.reshape(-1, row.shape[0])), dtype=np.float64)
        values[start:start + len(block)] = predictions.reshape(len(block), n_background).mean(axis=1)
    return values


def _exact_row(predict: PredictFn, row: np.ndarray, background: np.ndarray,
               masks: np.ndarray, bits: np.ndarray, weights: np.ndarray) -> np.ndarray:
    values = _coalition_values(predict, row, background, bits)
    size = bits.sum(axis=1)
    phi = np.empty(bits.shape[1])
    for i in range(bits.shape[1]):
        without = masks[~bits[:, i]]
        phi[i] = np.sum(weights[size[without]] * (values[without | (1 << i)] - values[without]))
    return phi


def _sampled_row(predict: PredictFn, row: np.ndarray, background: np.ndarray,
                 n_permutations: int, rng: np.random.Generator):
    k = row.shape[0]
    orders = np.array([rng.permutation(k) for _ in range(n_permutations)])
    position = np.argsort(orders, axis=1)
    steps = np.arange(k + 1)
    # membership[p, j, f]: feature f is among the first j features of permutation p
    membership = position[:, None, :] < steps[None, :, None]
    values = _coalition_values(predict, row, background, membership.reshape(-1, k)).reshape(n_permutations, k + 1)
    contributions = np.empty((n_permutations, k))
    np.put_along_axis(contributions, orders, np.diff(values, axis=1), axis=1)
    phi = contributions.mean(axis=0)
    se = contributions.std(axis=0, ddof=1) / np.sqrt(n_permutations) if n_permutations > 1 \
        else np.full(k, np.inf)
    return phi, se


def shapley(model, rows, background, mode: str = "exact", seed: int = 0, n_permutations: int = 200,
            feature_names: Optional[Sequence[str]] = None) -> AttributionResult:
    """
    Shapley values of each feature for each row.

    Args:
        model: Object with ``predict_matrix`` (e.g. TreeEnsemble) or a callable on feature matrices
        rows: Rows to explain, as a Table or a feature matrix
        background: Reference rows standing in for absent features
        mode: ``exact`` enumerates every coalition; ``sampled`` averages random permutations
        seed: Permutation seed (sampled mode)
        n_permutations: Permutations per row (sampled mode)
        feature_names: Column names when matrices are passed

    Returns:
        AttributionResult

    Raises:
        DataError: Empty background
        ConfigError: Unknown mode, or exact mode over too many features
        ShapeError: Rows and background disagree on the feature count
    """
    predict = _predictor(model)
    x, names = _as_matrix(rows, model, feature_names)
    b, _ = _as_matrix(background, model, names if isinstance(background, Table) else feature_names)
    if len(b) == 0:
        raise DataError("Shapley attribution needs a non-empty background set")
    if b.shape[1] != x.shape[1]:
        raise ShapeError(f"Rows have {x.shape[1]} features, background has {b.shape[1]}")
    k = x.shape[1]
    base_value = float(np.mean(predict(b)))
    predictions = np.asarray(predict(x), dtype=np.float64) if len(x) else np.zeros(0)
    phi = np.zeros((len(x), k))
    if mode == "exact":
        if k > app_config.EXACT_SHAPLEY_MAX_FEATURES:
            raise ConfigError(
                f"Exact Shapley enumeration is limited to {app_config.EXACT_SHAPLEY_MAX_FEATURES} features "
                f"(got {k}); use mode='sampled'")
        masks = np.arange(1 << k)
        bits = ((masks[:, None] >> np.arange(k)) & 1).astype(bool)
        weights = np.array([1.0 / (k * comb(k - 1, s)) for s in range(k)])
        for r in tqdm(range(len(x)), desc="shapley (exact)", disable=None):
            phi[r] = _exact_row(predict, x[r], b, masks, bits, weights)
        result = AttributionResult(phi, base_value, mode, names, x, predictions)
    elif mode == "sampled":
        if n_permutations < 1:
            raise ConfigError(f"n_permutations must be positive, got {n_permutations}")
        rng = np.random.default_rng(seed)
        se = np.zeros((len(x), k))
        for r in tqdm(range(len(x)), desc="shapley (sampled)", disable=None):
            phi[r], se[r] = _sampled_row(predict, x[r], b, n_permutations, rng)
        result = AttributionResult(phi, base_value, mode, names, x, predictions, n_permutations, se)
    else:
        raise ConfigError(f"Unknown Shapley mode '{mode}'; expected 'exact' or 'sampled'")
    log.info("Explained %d rows over %d features (%s mode), base value %.4f", len(x), k, mode, base_value)
    return result


def sample_background(table: Table, size: int, seed: int) -> Table:
    """Up to ``size`` rows drawn without replacement."""
    if len(table) == 0:
        raise DataError("Cannot draw a background set from an empty table")
    rng = np.random.default_rng(seed)
    positions = np.sort(rng.choice(len(table), size=min(size, len(table)), replace=False))
    return table.take(positions)


def dependence_file_name(feature: str, interaction_feature: str) -> str:
    return f"dependence_{sanitize_name(feature)}__{sanitize_name(interaction_feature)}.csv"


@dataclass
class SummaryExport:
    values: pd.DataFrame
    ranking: pd.DataFrame
    files: List[Path] = field(default_factory=list)


def summary_export(result: AttributionResult, feature_values: Optional[np.ndarray] = None,
                   out_dir: Optional[Path] = None) -> SummaryExport:
    """
    Long-format Shapley values plus the importance ranking.

    Files (when ``out_dir`` is given):
        ``shap_summary.csv``: feature, row, feature_value, phi (rows x features lines)
        ``shap_importance.csv``: rank, feature, mean_abs_phi
    """
    values = result.feature_values if feature_values is None else np.asarray(feature_values, dtype=np.float64)
    if values.shape != result.phi.shape:
        raise ShapeError(f"Feature values {values.shape} do not match attributions {result.phi.shape}")
    n, k = result.phi.shape
    frame = pd.DataFrame({
        "feature": np.tile(np.asarray(result.feature_names, dtype=object), n),
        "row": np.repeat(np.arange(n), k),
        "feature_value": values.reshape(-1),
        "phi": result.phi.reshape(-1),
    })
    export = SummaryExport(frame, result.importance())
    if out_dir is not None:
        out_dir = Path(out_dir)
        export.files.append(write_frame(frame, out_dir / "shap_summary.csv"))
        export.files.append(write_frame(export.ranking, out_dir / "shap_importance.csv"))
    return export


def dependence_export(result: AttributionResult, feature: str, interaction_feature: str,
                      out_dir: Optional[Path] = None, sort: bool = True) -> pd.DataFrame:
    """
    Dependence data for one feature, colored by a second feature.

    Columns: feature_value, phi, interaction_value; one line per explained row.
    Written to ``dependence_<feature>__<interaction>.csv`` when ``out_dir`` is given.

    Raises:
        SchemaError: If either feature was not explained
    """
    unknown = [f for f in (feature, interaction_feature) if f not in result.feature_names]
    if unknown:
        raise SchemaError(f"Unknown feature(s) {unknown}; explained features are {result.feature_names}")
    i = result.feature_names.index(feature)
    j = result.feature_names.index(interaction_feature)
    frame = pd.DataFrame({
        "feature_value": result.feature_values[:, i],
        "phi": result.phi[:, i],
        "interaction_value": result.feature_values[:, j],
    })
    if sort:
        frame = frame.sort_values("feature_value", kind="stable").reset_index(drop=True)
    if out_dir is not None:
        write_frame(frame, Path(out_dir) / dependence_file_name(feature, interaction_feature))
    return frame
