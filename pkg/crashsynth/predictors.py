"""
Squared-error gradient-boosted regression trees, grid search and the
accuracy report shared by every crash-frequency predictor.
"""

import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError
from sklearn.model_selection import KFold

from .config import GbtConfig
from .data_formatter import read_json, write_frame, write_json
from .data_schema import Table, numeric_matrix
from .errors import ConfigError, DataError, SchemaError, ShapeError

log = logging.getLogger(__name__)


def feature_matrix(table: Table, feature_names: Optional[Sequence[str]] = None) -> Tuple[np.ndarray, List[str]]:
    """
    Numeric feature view used by the predictors: value-map indices for discrete
    columns, raw values for real ones.

    Raises:
        SchemaError: If a requested feature is missing
    """
    names = list(feature_names) if feature_names is not None else [c.name for c in table.schema.feature_columns]
    missing = [n for n in names if n not in table.schema.names]
    if missing:
        raise SchemaError(f"Table lacks model features {missing}")
    return numeric_matrix(table, names), names


def candidate_thresholds(values: np.ndarray, max_bins: int) -> np.ndarray:
    """
    Split thresholds for one feature.

    Midpoints between consecutive distinct values when there are at most
    ``max_bins`` of them, otherwise midpoints between distinct quantiles.
    """
    unique = np.unique(values)
    if len(unique) > max_bins:
        unique = np.unique(np.quantile(values, np.linspace(0.0, 1.0, max_bins)))
    return (unique[:-1] + unique[1:]) / 2.0


@dataclass
class RegressionTree:
    """Flat binary tree; ``feature == -1`` marks a leaf. Rows with x <= threshold go left."""
    feature: List[int] = field(default_factory=list)
    threshold: List[float] = field(default_factory=list)
    left: List[int] = field(default_factory=list)
    right: List[int] = field(default_factory=list)
    value: List[float] = field(default_factory=list)

    def _add(self, value: float) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(float(value))
        return len(self.feature) - 1

    @property
    def depth(self) -> int:
        def _depth(node):
            if self.feature[node] < 0:
                return 0
            return 1 + max(_depth(self.left[node]), _depth(self.right[node]))
        return _depth(0) if self.feature else 0

    def predict(self, x: np.ndarray) -> np.ndarray:
        feature = np.asarray(self.feature)
        threshold = np.asarray(self.threshold)
        left, right = np.asarray(self.left), np.asarray(self.right)
        node = np.zeros(len(x), dtype=np.int64)
        rows = np.arange(len(x))
        while True:
            active = feature[node] >= 0
            if not active.any():
                break
            f = feature[node[active]]
            go_left = x[rows[active], f] <= threshold[node[active]]
            node[active] = np.where(go_left, left[node[active]], right[node[active]])
        return np.asarray(self.value)[node]

    def to_dict(self, node: int = 0) -> Dict[str, Any]:
        """Nested split records."""
        if self.feature[node] < 0:
            return {"value": self.value[node]}
        return {
            "feature": self.feature[node],
            "threshold": self.threshold[node],
            "left": self.to_dict(self.left[node]),
            "right": self.to_dict(self.right[node]),
        }

    @classmethod
    def from_dict(cls, record: Dict[str, Any]) -> "RegressionTree":
        tree = cls()

        def _build(rec):
            node = tree._add(rec.get("value", 0.0))
            if "feature" in rec:
                tree.feature[node] = int(rec["feature"])
                tree.threshold[node] = float(rec["threshold"])
                tree.left[node] = _build(rec["left"])
                tree.right[node] = _build(rec["right"])
            return node

        _build(record)
        return tree


def _grow(bins: np.ndarray, thresholds: List[np.ndarray], residual: np.ndarray,
          max_depth: int, min_leaf: int) -> RegressionTree:
    tree = RegressionTree()

    def _split(rows: np.ndarray, depth: int) -> int:
        g = residual[rows]
        node = tree._add(g.mean())
        if depth >= max_depth or len(rows) < 2 * min_leaf:
            return node
        total, n = g.sum(), len(rows)
        parent_score = total * total / n
        best_gain, best_feature, best_k = 1e-12, -1, -1
        for j, thr in enumerate(thresholds):
            if len(thr) == 0:
                continue
            counts = np.bincount(bins[rows, j], minlength=len(thr) + 1)
            sums = np.bincount(bins[rows, j], weights=g, minlength=len(thr) + 1)
            n_left = np.cumsum(counts)[:-1]
            s_left = np.cumsum(sums)[:-1]
            n_right = n - n_left
            valid = (n_left >= min_leaf) & (n_right >= min_leaf)
            if not valid.any():
                continue
            with np.errstate(divide="ignore", invalid="ignore"):
                gain = s_left ** 2 / n_left + (total - s_left) ** 2 / n_right - parent_score
            gain = np.where(valid, gain, -np.inf)
            k = int(np.argmax(gain))
            if gain[k] > best_gain:
                best_gain, best_feature, best_k = gain[k], j, k
        if best_feature < 0:
            return node
        go_left = bins[rows, best_feature] <= best_k
        tree.feature[node] = best_feature
        tree.threshold[node] = float(thresholds[best_feature][best_k])
        tree.left[node] = _split(rows[go_left], depth + 1)
        tree.right[node] = _split(rows[~go_left], depth + 1)
        return node

    _split(np.arange(len(residual)), 0)
    return tree


@dataclass
class TreeEnsemble:
    """prediction = base + lr * sum of tree outputs."""
    feature_names: List[str]
    base_prediction: float
    learning_rate: float
    trees: List[RegressionTree] = field(default_factory=list)
    config: Dict[str, Any] = field(default_factory=dict)
    training_mse: List[float] = field(default_factory=list)

    def predict_matrix(self, x: np.ndarray) -> np.ndarray:
        out = np.full(len(x), self.base_prediction)
        for tree in self.trees:
            out += self.learning_rate * tree.predict(x)
        return out

    def to_dict(self) -> Dict[str, Any]:
        return {
            "feature_names": self.feature_names,
            "base_prediction": self.base_prediction,
            "learning_rate": self.learning_rate,
            "config": self.config,
            "training_mse": self.training_mse,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> "TreeEnsemble":
        return cls(
            feature_names=list(document["feature_names"]),
            base_prediction=float(document["base_prediction"]),
            learning_rate=float(document["learning_rate"]),
            trees=[RegressionTree.from_dict(t) for t in document["trees"]],
            config=dict(document.get("config", {})),
            training_mse=list(document.get("training_mse", [])),
        )


def train_gbt_matrix(x: np.ndarray, y: np.ndarray, config: GbtConfig,
                     feature_names: Sequence[str]) -> TreeEnsemble:
    """
    Boost depth-limited trees on residuals of a matrix problem.

    Raises:
        DataError: If there are no rows
    """
    if len(y) == 0:
        raise DataError("Cannot train boosted trees on an empty table")
    thresholds = [candidate_thresholds(x[:, j], config.max_bins) for j in range(x.shape[1])]
    bins = np.column_stack([np.searchsorted(t, x[:, j], side="left") for j, t in enumerate(thresholds)]) \
        if x.shape[1] else np.zeros((len(y), 0), dtype=np.int64)
    model = TreeEnsemble(list(feature_names), float(np.mean(y)), config.lr, config=config.model_dump())
    prediction = np.full(len(y), model.base_prediction)
    for _ in range(config.n_trees):
        tree = _grow(bins, thresholds, y - prediction, config.max_depth, config.min_leaf)
        model.trees.append(tree)
        prediction = prediction + config.lr * tree.predict(x)
        model.training_mse.append(float(np.mean((y - prediction) ** 2)))
    return model


def train_gbt(table: Table, config: GbtConfig, seed: int = 0) -> TreeEnsemble:
    """
    Squared-error gradient boosting on the table's features.

    Args:
        table: Training rows; the target is the schema's target column
        config: Tree count, depth, learning rate, leaf size and bin count
        seed: Unused by the deterministic split search; kept for a uniform stage signature

    Returns:
        TreeEnsemble
    """
    x, names = feature_matrix(table)
    model = train_gbt_matrix(x, table.target_values(), config, names)
    log.info("Trained %d trees, training MSE %.4f", len(model.trees),
             model.training_mse[-1] if model.training_mse else float(np.var(table.target_values())))
    return model


def predict_gbt(model: TreeEnsemble, table: Table) -> np.ndarray:
    """
    One prediction per row.

    Raises:
        SchemaError: If the table lacks a feature the model was trained on
    """
    x, _ = feature_matrix(table, model.feature_names)
    return model.predict_matrix(x)


def _grid_configs(grid: Dict[str, Sequence[Any]], base: GbtConfig) -> List[GbtConfig]:
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigError("Grid search needs at least one value per hyperparameter")
    keys = sorted(grid)
    configs = []
    for values in itertools.product(*(grid[k] for k in keys)):
        try:
            configs.append(GbtConfig(**{**base.model_dump(), **dict(zip(keys, values))}))
        except ValidationError as e:
            raise ConfigError(f"Invalid grid cell {dict(zip(keys, values))}: {e}") from e
    return configs


def grid_search(table: Table, grid: Dict[str, Sequence[Any]], folds: int, seed: int,
                base: Optional[GbtConfig] = None) -> Tuple[GbtConfig, pd.DataFrame]:
    """
    K-fold cross-validated search over boosted-tree hyperparameters.

    Args:
        table: Training rows
        grid: Hyperparameter name to candidate values
        folds: Number of folds
        seed: Fold assignment seed
        base: Values for hyperparameters the grid does not mention

    Returns:
        (config with the lowest mean validation MSE, one CV row per grid cell);
        ties go to the earliest cell
    """
    base = base or GbtConfig()
    configs = _grid_configs(grid, base)
    x, names = feature_matrix(table)
    y = table.target_values()
    if len(y) < folds:
        raise DataError(f"Grid search needs at least {folds} rows, got {len(y)}")
    splits = list(KFold(n_splits=folds, shuffle=True, random_state=seed).split(x))
    rows = []
    for config in configs:
        scores = []
        for train_idx, valid_idx in splits:
            model = train_gbt_matrix(x[train_idx], y[train_idx], config, names)
            scores.append(float(np.mean((model.predict_matrix(x[valid_idx]) - y[valid_idx]) ** 2)))
        rows.append({**{k: getattr(config, k) for k in sorted(grid)},
                     "mean_mse": float(np.mean(scores)), "std_mse": float(np.std(scores))})
        log.debug("Grid cell %s: mean validation MSE %.4f", rows[-1], rows[-1]["mean_mse"])
    table_cv = pd.DataFrame(rows)
    best = int(np.argmin(table_cv["mean_mse"].to_numpy()))
    log.info("Grid search picked %s (mean validation MSE %.4f)",
             {k: getattr(configs[best], k) for k in sorted(grid)}, table_cv["mean_mse"].iloc[best])
    return configs[best], table_cv


def save_gbt(model: TreeEnsemble, path: Path) -> Path:
    return write_json(path, model.to_dict())


def load_gbt(path: Path) -> TreeEnsemble:
    return TreeEnsemble.from_dict(read_json(path))


@dataclass
class AccuracyReport:
    """MSE and RMSE over all rows and over rows with a non-zero target."""
    mse: float
    rmse: float
    nonzero_mse: float
    nonzero_rmse: float
    n: int
    n_nonzero: int

    def to_dict(self, model: Optional[str] = None) -> Dict[str, Any]:
        out = {"mse": self.mse, "rmse": self.rmse, "nonzero_mse": self.nonzero_mse,
               "nonzero_rmse": self.nonzero_rmse, "n": self.n, "n_nonzero": self.n_nonzero}
        if model is not None:
            out["model"] = model
        return out

    def write_csv(self, path: Path, model: str) -> Path:
        return write_frame(pd.DataFrame([self.to_dict(model)]), path)


def evaluate(predictions, targets) -> AccuracyReport:
    """
    Squared-error metrics overall and on the non-zero target stratum.

    The non-zero metrics are NaN when no target is non-zero.

    Raises:
        ShapeError: If the lengths differ
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape:
        raise ShapeError(f"evaluate: {predictions.shape[0]} predictions for {targets.shape[0]} targets")
    errors = (predictions - targets) ** 2
    nonzero = targets != 0
    mse = float(errors.mean()) if len(errors) else float("nan")
    nonzero_mse = float(errors[nonzero].mean()) if nonzero.any() else float("nan")
    return AccuracyReport(mse, float(np.sqrt(mse)), nonzero_mse, float(np.sqrt(nonzero_mse)),
                          int(len(errors)), int(nonzero.sum()))
