"""
Synthetic-data quality metrics: classifier two-sample test, alpha-precision,
beta-recall, pair-wise correlation difference, and binned density exports.

Every metric encodes both tables with a schema fitted on their union, so the
real/synthetic roles only matter where a metric defines them.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import expit
from scipy.stats import rankdata
from sklearn.model_selection import KFold

from .config import QualityConfig, app_config
from .data_formatter import sanitize_name, write_frame
from .data_schema import Table, TableSchema, encode, numeric_matrix
from .errors import DataError, SchemaError
from .validators import require_same_schema

log = logging.getLogger(__name__)


def _model_schema(real: Table, synthetic: Table) -> TableSchema:
    require_same_schema(real.schema.without_provenance(), synthetic.schema.without_provenance())
    return real.schema.without_provenance()


def _shared_encoding(real: Table, synthetic: Table) -> Tuple[np.ndarray, np.ndarray]:
    schema = _model_schema(real, synthetic)
    union = pd.concat([real.frame[schema.names], synthetic.frame[schema.names]], axis=0)
    fitted = schema.fit(union)
    a = encode(Table(fitted, real.frame[schema.names])).values
    b = encode(Table(fitted, synthetic.frame[schema.names])).values
    return a, b


def _lexsorted(values: np.ndarray) -> np.ndarray:
    if values.shape[1] == 0:
        return values
    return values[np.lexsort(values.T[::-1])]


def auc(labels, scores) -> float:
    """
    Rank-based area under the ROC curve; tied scores count one half.

    Raises:
        DataError: If only one class is present
    """
    labels = np.asarray(labels).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


class LogisticClassifier:
    """
    Logistic regression trained by full-batch gradient descent on the mean log-loss.

    Args:
        iterations: Gradient steps
        lr: Step size
    """

    def __init__(self, iterations: int = 500, lr: float = 0.1):
        self.iterations = iterations
        self.lr = lr
        self.weights: Optional[np.ndarray] = None
        self.intercept = 0.0

    def fit(self, features: np.ndarray, labels: np.ndarray) -> "LogisticClassifier":
        x = np.asarray(features, dtype=np.float64)
        y = np.asarray(labels, dtype=np.float64)
        self.weights = np.zeros(x.shape[1])
        self.intercept = 0.0
        for _ in range(self.iterations):
            residual = expit(x @ self.weights + self.intercept) - y
            self.weights -= self.lr * (x.T @ residual) / len(y)
            self.intercept -= self.lr * residual.mean()
        return self

    def decision_function(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.weights + self.intercept

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        """Probability of the positive class, kept strictly inside (0, 1)."""
        return np.clip(expit(self.decision_function(features)), 1e-15, 1.0 - 1e-15)


def c2st(real: Table, synthetic: Table, folds: int = 5, seed: int = 0,
         iterations: int = 500, lr: float = 0.1) -> float:
    """
    Classifier two-sample detection score.

    Real rows are labelled 0 and synthetic rows 1; a logistic classifier is
    cross-validated on the column-standardized encoded matrix and the mean
    validation AUC maps to ``1 - (2 * max(AUC, 0.5) - 1)``.

    Args:
        real: Real rows
        synthetic: Synthetic rows with the same schema
        folds: Cross-validation folds
        seed: Fold assignment seed
        iterations: Classifier gradient steps
        lr: Classifier step size

    Returns:
        Score in [0, 1]; 1 means indistinguishable

    Raises:
        DataError: If either table is empty or there are fewer rows than folds
        SchemaError: If the schemas differ
    """
    if len(real) == 0 or len(synthetic) == 0:
        raise DataError("c2st needs nonempty real and synthetic tables")
    if len(real) + len(synthetic) < folds:
        raise DataError(f"c2st needs at least {folds} rows for {folds}-fold cross-validation")
    a, b = _shared_encoding(real, synthetic)
    features = np.vstack([_lexsorted(a), _lexsorted(b)])
    labels = np.concatenate([np.zeros(len(a)), np.ones(len(b))])
    std = features.std(axis=0)
    features = (features - features.mean(axis=0)) / np.where(std > 0, std, 1.0)

    scores = []
    splitter = KFold(n_splits=folds, shuffle=True, random_state=seed)
    for train_idx, valid_idx in splitter.split(features):
        if len(np.unique(labels[valid_idx])) < 2 or len(np.unique(labels[train_idx])) < 2:
            continue
        model = LogisticClassifier(iterations, lr).fit(features[train_idx], labels[train_idx])
        scores.append(auc(labels[valid_idx], model.decision_function(features[valid_idx])))
    if not scores:
        raise DataError("c2st: no fold contained both real and synthetic rows")
    mean_auc = float(np.mean(scores))
    return 1.0 - (2.0 * max(mean_auc, 0.5) - 1.0)


def support_coverage(reference: np.ndarray, candidates: np.ndarray, grid: Sequence[float]) -> np.ndarray:
    """
    Share of candidates inside each centroid ball of the reference.

    The ball for level a is centred on the reference centroid with radius the
    a-quantile of reference distances to it.
    """
    centre = reference.mean(axis=0)
    reference_dist = np.linalg.norm(reference - centre, axis=1)
    candidate_dist = np.linalg.norm(candidates - centre, axis=1)
    radii = np.quantile(reference_dist, np.asarray(grid))
    return np.array([np.mean(candidate_dist <= r) for r in radii])


def _coverage_score(coverage: np.ndarray, grid: Sequence[float]) -> float:
    return float(np.clip(1.0 - 2.0 * np.mean(np.abs(coverage - np.asarray(grid))), 0.0, 1.0))


def alpha_precision(real: Table, synthetic: Table, alpha_grid: Optional[Sequence[float]] = None) -> float:
    """
    Fidelity: how often synthetic rows fall in the alpha-supports of the real data.

    Raises:
        DataError: If either table is empty
    """
    if len(real) == 0 or len(synthetic) == 0:
        raise DataError("alpha_precision needs nonempty tables")
    grid = alpha_grid or app_config.ALPHA_GRID
    a, b = _shared_encoding(real, synthetic)
    return _coverage_score(support_coverage(a, b, grid), grid)


def beta_recall(real: Table, synthetic: Table, beta_grid: Optional[Sequence[float]] = None) -> float:
    """
    Diversity: how often real rows fall in the beta-supports of the synthetic data.

    Raises:
        DataError: If either table is empty
    """
    if len(real) == 0 or len(synthetic) == 0:
        raise DataError("beta_recall needs nonempty tables")
    grid = beta_grid or app_config.ALPHA_GRID
    a, b = _shared_encoding(real, synthetic)
    return _coverage_score(support_coverage(b, a, grid), grid)


@dataclass
class PcdResult:
    matrix: pd.DataFrame
    mean: float
    zero_variance_columns: List[str] = field(default_factory=list)


def _correlations(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    std = values.std(axis=0)
    constant = std == 0
    centred = (values - values.mean(axis=0)) / np.where(constant, 1.0, std)
    corr = centred.T @ centred / len(values)
    corr[constant, :] = 0.0
    corr[:, constant] = 0.0
    return np.clip(corr, -1.0, 1.0), constant


def pcd(real: Table, synthetic: Table) -> PcdResult:
    """
    Pair-wise correlation difference ``|S_AB - R_AB| / 2`` on numeric encodings.

    Discrete columns enter as value-map indices. A column constant in either
    table has its entries reported as 0 and is flagged.

    Raises:
        DataError: If either table has fewer than two rows
    """
    schema = _model_schema(real, synthetic)
    if len(real) < 2 or len(synthetic) < 2:
        raise DataError("pcd needs at least two rows in each table")
    names = schema.names
    r_corr, r_const = _correlations(numeric_matrix(Table(schema, real.frame[names]), names))
    s_corr, s_const = _correlations(numeric_matrix(Table(schema, synthetic.frame[names]), names))
    flagged = r_const | s_const
    diff = np.abs(s_corr - r_corr) / 2.0
    diff[flagged, :] = 0.0
    diff[:, flagged] = 0.0
    np.fill_diagonal(diff, 0.0)
    upper = diff[np.triu_indices(len(names), k=1)]
    flagged_names = [n for n, f in zip(names, flagged) if f]
    if flagged_names:
        log.warning("PCD: zero-variance columns %s reported as 0", flagged_names)
    return PcdResult(pd.DataFrame(diff, index=names, columns=names),
                     float(upper.mean()) if upper.size else 0.0, flagged_names)


@dataclass
class DensityExport:
    histograms: Dict[str, pd.DataFrame] = field(default_factory=dict)
    joints: Dict[str, pd.DataFrame] = field(default_factory=dict)
    total_variation: Dict[str, float] = field(default_factory=dict)
    files: List[Path] = field(default_factory=list)


def _bin_edges(schema: TableSchema, name: str, real: Table, synthetic: Table, bins: int) -> np.ndarray:
    c = schema.column(name)
    if c.is_discrete:
        return np.arange(c.cardinality + 1) - 0.5
    values = np.concatenate([real.frame[name].to_numpy(dtype=np.float64),
                             synthetic.frame[name].to_numpy(dtype=np.float64)])
    low, high = (values.min(), values.max()) if len(values) else (0.0, 1.0)
    if low == high:
        low, high = low - 0.5, high + 0.5
    return np.linspace(low, high, bins + 1)


def _numeric_column(table: Table, name: str) -> np.ndarray:
    return numeric_matrix(table, [name])[:, 0]


def total_variation(real_counts: np.ndarray, synthetic_counts: np.ndarray) -> float:
    """Half the L1 distance between the two normalized histograms."""
    p = real_counts / max(real_counts.sum(), 1)
    q = synthetic_counts / max(synthetic_counts.sum(), 1)
    return float(0.5 * np.abs(p - q).sum())


def density_export(real: Table, synthetic: Table, columns: Sequence[str],
                   joint_pairs: Sequence[Sequence[str]] = (), bins: int = 30,
                   out_dir: Optional[Path] = None) -> DensityExport:
    """
    Aligned marginal and joint histograms of real and synthetic rows.

    Discrete columns get one bin per category; real columns get ``bins``
    equal-width bins over the union range. Edges are shared by both tables.

    Args:
        real: Real rows
        synthetic: Synthetic rows
        columns: Columns to histogram
        joint_pairs: Column pairs to bin jointly
        bins: Bins per real-valued column
        out_dir: When given, each histogram is written as
            ``histogram_<column>.csv`` and each pair as ``joint_<a>__<b>.csv``

    Raises:
        SchemaError: If a named column does not exist
    """
    schema = _model_schema(real, synthetic)
    unknown = [n for n in list(columns) + [n for pair in joint_pairs for n in pair] if n not in schema.names]
    if unknown:
        raise SchemaError(f"density_export: unknown columns {sorted(set(unknown))}")
    export = DensityExport()
    for name in columns:
        edges = _bin_edges(schema, name, real, synthetic, bins)
        r_counts, _ = np.histogram(_numeric_column(real, name), bins=edges)
        s_counts, _ = np.histogram(_numeric_column(synthetic, name), bins=edges)
        c = schema.column(name)
        frame = pd.DataFrame({
            "bin": list(c.value_map) if c.is_discrete else [f"[{lo:.6g}, {hi:.6g})" for lo, hi in zip(edges[:-1], edges[1:])],
            "lower": edges[:-1],
            "upper": edges[1:],
            "real": r_counts,
            "synthetic": s_counts,
        })
        export.histograms[name] = frame
        export.total_variation[name] = total_variation(r_counts, s_counts)
        if out_dir is not None:
            export.files.append(write_frame(frame, Path(out_dir) / f"histogram_{sanitize_name(name)}.csv"))

    for pair in joint_pairs:
        x_name, y_name = pair
        x_edges = _bin_edges(schema, x_name, real, synthetic, bins)
        y_edges = _bin_edges(schema, y_name, real, synthetic, bins)
        r_counts, _, _ = np.histogram2d(_numeric_column(real, x_name), _numeric_column(real, y_name),
                                        bins=[x_edges, y_edges])
        s_counts, _, _ = np.histogram2d(_numeric_column(synthetic, x_name), _numeric_column(synthetic, y_name),
                                        bins=[x_edges, y_edges])
        xi, yi = np.meshgrid(np.arange(len(x_edges) - 1), np.arange(len(y_edges) - 1), indexing="ij")
        frame = pd.DataFrame({
            "x_bin": xi.ravel(),
            "y_bin": yi.ravel(),
            "x_lower": x_edges[:-1][xi.ravel()],
            "y_lower": y_edges[:-1][yi.ravel()],
            "real": r_counts.ravel().astype(np.int64),
            "synthetic": s_counts.ravel().astype(np.int64),
        })
        key = f"{x_name}__{y_name}"
        export.joints[key] = frame
        if out_dir is not None:
            path = Path(out_dir) / f"joint_{sanitize_name(x_name)}__{sanitize_name(y_name)}.csv"
            export.files.append(write_frame(frame, path))
    return export


@dataclass
class QualityReport:
    c2st: float
    alpha_precision: float
    beta_recall: float
    pcd_matrix: pd.DataFrame
    pcd_mean: float
    zero_variance_columns: List[str] = field(default_factory=list)
    density: DensityExport = field(default_factory=DensityExport)

    def to_dict(self) -> dict:
        return {
            "c2st": self.c2st,
            "alpha_precision": self.alpha_precision,
            "beta_recall": self.beta_recall,
            "pcd_mean": self.pcd_mean,
            "pcd_matrix": {
                "columns": list(self.pcd_matrix.columns),
                "values": self.pcd_matrix.to_numpy().tolist(),
            },
            "zero_variance_columns": self.zero_variance_columns,
            "total_variation": self.density.total_variation,
            "density_files": sorted(p.name for p in self.density.files),
        }


def evaluate_quality(real: Table, synthetic: Table, config: QualityConfig, seed: int,
                     out_dir: Optional[Path] = None) -> QualityReport:
    """
    Compute every quality metric and the density exports.

    Args:
        real: Real rows
        synthetic: Synthetic rows
        config: Metric settings; an empty ``columns`` list exports every model column
        seed: C2ST fold seed
        out_dir: Directory for density CSVs

    Returns:
        QualityReport
    """
    schema = _model_schema(real, synthetic)
    columns = config.columns or schema.names
    pairs = [p for p in config.joint_pairs if all(n in schema.names for n in p)]
    pcd_result = pcd(real, synthetic)
    report = QualityReport(
        c2st=c2st(real, synthetic, config.folds, seed, config.iterations, config.lr),
        alpha_precision=alpha_precision(real, synthetic),
        beta_recall=beta_recall(real, synthetic),
        pcd_matrix=pcd_result.matrix,
        pcd_mean=pcd_result.mean,
        zero_variance_columns=pcd_result.zero_variance_columns,
        density=density_export(real, synthetic, columns, pairs, config.bins, out_dir),
    )
    log.info("Quality: c2st %.4f, alpha-precision %.4f, beta-recall %.4f, pcd %.4f",
             report.c2st, report.alpha_precision, report.beta_recall, report.pcd_mean)
    return report
