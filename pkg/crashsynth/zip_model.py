"""
Zero-inflated Poisson regression fitted by maximum likelihood.

A row is a structural zero with probability p = expit(x.gamma); otherwise its
count is Poisson with rate lambda = exp(x.beta). Both linear predictors use an
intercept plus the standardized numeric features.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, gammaln

from .config import ZipConfig
from .data_formatter import read_json, write_json
from .data_schema import Table, numeric_matrix, standardize_matrix
from .errors import ConvergenceError, DataError, SchemaError

log = logging.getLogger(__name__)

LOG_RATE_BOUND = 30.0
INNER_NEWTON_STEPS = 10


@dataclass
class ZipParams:
    """
    Fitted coefficients over ``[intercept] + feature_names``.

    ``means``/``stds`` are the training standardization; ``*_se`` hold
    observed-information standard errors.
    """
    feature_names: List[str]
    means: np.ndarray
    stds: np.ndarray
    inflation: np.ndarray
    rate: np.ndarray
    log_likelihood: float
    inflation_se: np.ndarray = None
    rate_se: np.ndarray = None
    n_iter: int = 0
    trajectory: List[float] = field(default_factory=list)

    @property
    def coefficient_names(self) -> List[str]:
        return ["intercept"] + list(self.feature_names)

    def to_dict(self) -> Dict[str, Any]:
        names = self.coefficient_names

        def named(values):
            return None if values is None else dict(zip(names, np.asarray(values).tolist()))

        return {
            "feature_names": list(self.feature_names),
            "means": self.means,
            "stds": self.stds,
            "inflation": named(self.inflation),
            "rate": named(self.rate),
            "inflation_se": named(self.inflation_se),
            "rate_se": named(self.rate_se),
            "log_likelihood": self.log_likelihood,
            "n_iter": self.n_iter,
            "trajectory": self.trajectory,
        }

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> "ZipParams":
        names = ["intercept"] + list(document["feature_names"])

        def vector(key):
            record = document.get(key)
            return None if record is None else np.array([record[n] for n in names], dtype=np.float64)

        return cls(
            feature_names=list(document["feature_names"]),
            means=np.asarray(document["means"], dtype=np.float64),
            stds=np.asarray(document["stds"], dtype=np.float64),
            inflation=vector("inflation"),
            rate=vector("rate"),
            log_likelihood=float(document["log_likelihood"]),
            inflation_se=vector("inflation_se"),
            rate_se=vector("rate_se"),
            n_iter=int(document.get("n_iter", 0)),
            trajectory=list(document.get("trajectory", [])),
        )


def design_matrix(z: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(len(z)), z])


def _log_rate(x: np.ndarray, beta: np.ndarray) -> np.ndarray:
    return np.clip(x @ beta, -LOG_RATE_BOUND, LOG_RATE_BOUND)


def log_likelihood(x: np.ndarray, y: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> float:
    """
    Sum of log P(y = 0) = log(p + (1 - p) exp(-lambda)) over zero rows and
    log(1 - p) + log Poisson(y; lambda) over positive rows.
    """
    eta = x @ gamma
    log_lam = _log_rate(x, beta)
    lam = np.exp(log_lam)
    zero = y == 0
    ll_zero = np.logaddexp(eta[zero], -lam[zero]) - np.logaddexp(0.0, eta[zero])
    pos = ~zero
    ll_pos = -np.logaddexp(0.0, eta[pos]) + y[pos] * log_lam[pos] - lam[pos] - gammaln(y[pos] + 1.0)
    return float(ll_zero.sum() + ll_pos.sum())


def responsibilities(x: np.ndarray, y: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Posterior probability that each row is a structural zero (0 for positive counts)."""
    lam = np.exp(_log_rate(x, beta))
    return np.where(y == 0, expit(x @ gamma + lam), 0.0)


def score(x: np.ndarray, y: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Gradient of :func:`log_likelihood` with respect to ``(gamma, beta)``."""
    w = responsibilities(x, y, gamma, beta)
    p = expit(x @ gamma)
    lam = np.exp(_log_rate(x, beta))
    return np.concatenate([x.T @ (w - p), x.T @ ((1.0 - w) * (y - lam))])


def _newton_ascent(objective, gradient, hessian, theta: np.ndarray, ridge: float) -> np.ndarray:
    current = objective(theta)
    for _ in range(INNER_NEWTON_STEPS):
        h = hessian(theta) + ridge * np.eye(len(theta))
        step = np.linalg.solve(h, gradient(theta))
        scale = 1.0
        while scale > 1e-8:
            candidate = theta + scale * step
            value = objective(candidate)
            if value >= current:
                break
            scale *= 0.5
        else:
            return theta
        improvement = value - current
        theta, current = candidate, value
        if improvement <= 1e-12 * max(1.0, abs(current)):
            break
    return theta


def _inflation_step(x: np.ndarray, w: np.ndarray, gamma: np.ndarray, ridge: float) -> np.ndarray:
    """Weighted logistic regression of the responsibilities, by IRLS."""
    def objective(g):
        eta = x @ g
        return float(np.sum(w * eta - np.logaddexp(0.0, eta)))

    def gradient(g):
        return x.T @ (w - expit(x @ g))

    def hessian(g):
        p = expit(x @ g)
        return (x * (p * (1.0 - p))[:, None]).T @ x

    return _newton_ascent(objective, gradient, hessian, gamma, ridge)


def _rate_step(x: np.ndarray, y: np.ndarray, w: np.ndarray, beta: np.ndarray, ridge: float) -> np.ndarray:
    """Poisson regression weighted by the probability of the count state, by IRLS."""
    weight = 1.0 - w

    def objective(b):
        log_lam = _log_rate(x, b)
        return float(np.sum(weight * (y * log_lam - np.exp(log_lam))))

    def gradient(b):
        return x.T @ (weight * (y - np.exp(_log_rate(x, b))))

    def hessian(b):
        return (x * (weight * np.exp(_log_rate(x, b)))[:, None]).T @ x

    return _newton_ascent(objective, gradient, hessian, beta, ridge)


def _initial_params(x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    positive_mean = float(y[y > 0].mean())
    # Poisson zero share implied by the positive mean, ignoring truncation
    excess = (np.mean(y == 0) - np.exp(-positive_mean)) / max(1.0 - np.exp(-positive_mean), 1e-12)
    p0 = float(np.clip(excess, 0.05, 0.95))
    gamma = np.zeros(x.shape[1])
    beta = np.zeros(x.shape[1])
    gamma[0] = np.log(p0 / (1.0 - p0))
    beta[0] = np.log(positive_mean)
    return gamma, beta


def standard_errors(x: np.ndarray, y: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """
    Observed-information standard errors.

    The information matrix is the negated central-difference Jacobian of the
    analytic score; it is inverted with a pseudo-inverse.
    """
    theta = np.concatenate([gamma, beta])
    k = len(gamma)
    jacobian = np.empty((len(theta), len(theta)))
    for j in range(len(theta)):
        h = 1e-5 * max(1.0, abs(theta[j]))
        up, down = theta.copy(), theta.copy()
        up[j] += h
        down[j] -= h
        jacobian[:, j] = (score(x, y, up[:k], up[k:]) - score(x, y, down[:k], down[k:])) / (2.0 * h)
    information = -(jacobian + jacobian.T) / 2.0
    covariance = np.linalg.pinv(information)
    return np.sqrt(np.clip(np.diag(covariance), 0.0, None))


def _polish(x: np.ndarray, y: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
            ll: float) -> Tuple[np.ndarray, np.ndarray, float]:
    """Quasi-Newton refinement of the EM optimum; kept only if it raises the likelihood."""
    k = len(gamma)
    n = len(y)

    def negative(theta):
        return -log_likelihood(x, y, theta[:k], theta[k:]) / n

    def negative_score(theta):
        return -score(x, y, theta[:k], theta[k:]) / n

    result = minimize(negative, np.concatenate([gamma, beta]), jac=negative_score, method="L-BFGS-B",
                      options={"maxiter": 500, "gtol": 1e-10})
    polished = -result.fun * n
    if np.isfinite(polished) and polished > ll:
        return result.x[:k], result.x[k:], float(polished)
    return gamma, beta, ll


def _check_counts(y: np.ndarray) -> None:
    if len(y) == 0:
        raise DataError("Cannot fit a zero-inflated Poisson model to an empty table")
    if np.any(y < 0) or np.any(y != np.round(y)):
        raise DataError("Zero-inflated Poisson target must hold non-negative integers")
    if not np.any(y > 0):
        raise DataError("All targets are zero; the inflation probability is not identifiable")


def fit_zip_matrix(z: np.ndarray, y: np.ndarray, config: ZipConfig) -> Tuple[np.ndarray, np.ndarray, float, List[float]]:
    """
    EM fit on already standardized features.

    Args:
        z: Standardized feature matrix (rows x features)
        y: Non-negative integer counts
        config: Iteration cap, relative tolerance and inner ridge

    Returns:
        (gamma, beta, log-likelihood, EM log-likelihood trajectory)

    Raises:
        DataError: Empty, negative, fractional or all-zero targets
        ConvergenceError: The log-likelihood decreased or did not settle within ``max_iter``
    """
    y = np.asarray(y, dtype=np.float64)
    _check_counts(y)
    x = design_matrix(z)
    gamma, beta = _initial_params(x, y)
    ll = log_likelihood(x, y, gamma, beta)
    trajectory = [ll]
    for _ in range(config.max_iter):
        w = responsibilities(x, y, gamma, beta)
        gamma = _inflation_step(x, w, gamma, config.ridge)
        beta = _rate_step(x, y, w, beta, config.ridge)
        new_ll = log_likelihood(x, y, gamma, beta)
        trajectory.append(new_ll)
        if new_ll < ll - 1e-9 * max(1.0, abs(ll)):
            raise ConvergenceError(
                f"EM log-likelihood decreased from {ll:.6f} to {new_ll:.6f} at iteration {len(trajectory) - 1}",
                trajectory)
        settled = abs(new_ll - ll) < config.tol * max(1.0, abs(ll))
        ll = new_ll
        if settled:
            break
    else:
        raise ConvergenceError(
            f"EM did not converge within {config.max_iter} iterations (last change "
            f"{trajectory[-1] - trajectory[-2]:.3e})", trajectory)
    gamma, beta, ll = _polish(x, y, gamma, beta, ll)
    return gamma, beta, ll, trajectory


def _standardized_features(table: Table, names: Sequence[str], means=None, stds=None):
    missing = [n for n in names if n not in table.schema.names]
    if missing:
        raise SchemaError(f"Table lacks model features {missing}")
    return standardize_matrix(numeric_matrix(table, names), means, stds)


def fit_zip(table: Table, config: ZipConfig) -> ZipParams:
    """
    Fit the zero-inflated Poisson model to a table's target.

    Args:
        table: Training rows with a count target
        config: EM settings

    Returns:
        ZipParams with standard errors
    """
    names = [c.name for c in table.schema.feature_columns]
    z, means, stds = _standardized_features(table, names)
    y = table.target_values()
    gamma, beta, ll, trajectory = fit_zip_matrix(z, y, config)
    se = standard_errors(design_matrix(z), y, gamma, beta)
    k = len(gamma)
    params = ZipParams(names, means, stds, gamma, beta, ll, se[:k], se[k:], len(trajectory) - 1, trajectory)
    log.info("ZIP fit: %d EM iterations, log-likelihood %.4f, mean inflation probability %.3f",
             params.n_iter, ll, float(np.mean(expit(design_matrix(z) @ gamma))))
    return params


def expected_count(p, lam) -> np.ndarray:
    """Mean of the zero-inflated law, (1 - p) * lambda."""
    return (1.0 - np.asarray(p, dtype=np.float64)) * np.asarray(lam, dtype=np.float64)


def zip_components(params: ZipParams, table: Table) -> Tuple[np.ndarray, np.ndarray]:
    """Per-row inflation probability and Poisson rate."""
    z, _, _ = _standardized_features(table, params.feature_names, params.means, params.stds)
    x = design_matrix(z)
    return expit(x @ params.inflation), np.exp(_log_rate(x, params.rate))


def zip_predict(params: ZipParams, table: Table) -> np.ndarray:
    """Expected count per row."""
    if len(table) == 0:
        return np.zeros(0)
    p, lam = zip_components(params, table)
    return expected_count(p, lam)


def save_zip(params: ZipParams, path: Path) -> Path:
    return write_json(path, params.to_dict())


def load_zip(path: Path) -> ZipParams:
    return ZipParams.from_dict(read_json(path))
