"""
Zero-inflated Poisson simulator supplying ground-truth crash-frequency tables.

Explanatory columns are drawn from declared marginals; the target follows
P(y = 0) = p + (1 - p) exp(-lambda) with logit(p) and log(lambda) linear in the
standardized numeric features, plus optional non-log-linear terms.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import brentq
from scipy.special import expit

from .data_schema import ROW_ID, ColumnSchema, Table, TableSchema, numeric_matrix, standardize_matrix
from .errors import SchemaError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ColumnMarginal:
    """
    Marginal law of one explanatory column.

    Discrete kinds draw from ``values`` with ``probabilities``; real-valued
    columns draw a normal with ``mean``/``std`` clipped to ``[low, high]``.
    """
    name: str
    kind: str
    values: Tuple = ()
    probabilities: Tuple[float, ...] = ()
    mean: float = 0.0
    std: float = 1.0
    low: float = -np.inf
    high: float = np.inf

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "real_valued":
            return np.clip(rng.normal(self.mean, self.std, size=n), self.low, self.high)
        choice = rng.choice(len(self.values), size=n, p=np.asarray(self.probabilities))
        return np.asarray(self.values)[choice]


@dataclass(frozen=True)
class SimulationSpec:
    """Explanatory marginals plus the target's declaration."""
    columns: Tuple[ColumnMarginal, ...]
    target: str = "Total_Crash"
    max_count: int = 12

    def __post_init__(self):
        names = [c.name for c in self.columns] + [self.target]
        if len(set(names)) != len(names):
            raise SchemaError("Simulation spec has duplicate column names")
        for c in self.columns:
            if c.kind == "real_valued":
                if not c.std > 0 or not c.low < c.high:
                    raise SchemaError(f"Simulation column '{c.name}': need std > 0 and low < high")
            else:
                if len(c.values) != len(c.probabilities) or len(c.values) < 2:
                    raise SchemaError(f"Simulation column '{c.name}': values and probabilities must align")
                if min(c.probabilities) < 0 or not np.isclose(sum(c.probabilities), 1.0):
                    raise SchemaError(f"Simulation column '{c.name}': probabilities must sum to 1")

    @property
    def feature_names(self):
        return [c.name for c in self.columns]

    def schema(self) -> TableSchema:
        columns = [ColumnSchema(self.target, "count", tuple(range(self.max_count + 1)), role="target")]
        for c in self.columns:
            columns.append(ColumnSchema(c.name, c.kind, tuple(c.values) if c.kind != "real_valued" else ()))
        return TableSchema(tuple(columns))


@dataclass(frozen=True)
class ZipProcess:
    """
    Coefficients of the generating law over standardized numeric features.

    Args:
        inflation_intercept: Intercept of logit(p)
        inflation_weights: Per-column weights of logit(p)
        rate_intercept: Intercept of log(lambda)
        rate_weights: Per-column weights of log(lambda)
        hour_cycle: Amplitude of a daily cosine in log(lambda), peaking at ``peak_hour``
        peak_hour: Hour of maximum crash rate
        interaction: Weight of the AAHT x Light_Presence product in log(lambda)
    """
    inflation_intercept: float = 1.0
    inflation_weights: Dict[str, float] = field(default_factory=dict)
    rate_intercept: float = float(np.log(0.65))
    rate_weights: Dict[str, float] = field(default_factory=dict)
    hour_cycle: float = 0.0
    peak_hour: float = 17.0
    interaction: float = 0.0

    @property
    def is_log_linear(self) -> bool:
        return self.hour_cycle == 0.0 and self.interaction == 0.0


def default_simulation_spec(max_count: int = 12) -> SimulationSpec:
    """Thirteen explanatory columns with road-segment shaped marginals."""
    hours = tuple(range(24))
    return SimulationSpec(columns=(
        ColumnMarginal("Hour", "ordinal", hours, tuple([1.0 / 24] * 24)),
        ColumnMarginal("Number_of_Lanes", "ordinal", (2, 3, 4, 5), (0.04, 0.45, 0.46, 0.05)),
        ColumnMarginal("Light_Presence", "nominal", (0, 1), (0.694, 0.306)),
        ColumnMarginal("Surface_Type", "nominal", (0, 1), (0.405, 0.595)),
        ColumnMarginal("AAHT", "real_valued", mean=2.661, std=1.751, low=0.0001, high=8.62),
        ColumnMarginal("Segment_Length", "real_valued", mean=0.134, std=0.124, low=0.05, high=1.1),
        ColumnMarginal("Lane_Width", "real_valued", mean=12.355, std=1.329, low=11.0, high=22.0),
        ColumnMarginal("Roadway_Width", "real_valued", mean=85.464, std=14.443, low=55.0, high=132.0),
        ColumnMarginal("Median_Width", "real_valued", mean=60.482, std=51.853, low=7.0, high=300.0),
        ColumnMarginal("Left_Shoulder_Width", "real_valued", mean=8.970, std=3.013, low=0.0, high=12.0),
        ColumnMarginal("Right_Shoulder_Width", "real_valued", mean=8.970, std=3.013, low=0.0, high=12.0),
        ColumnMarginal("Curvature_degree", "real_valued", mean=0.672, std=0.997, low=0.0, high=4.07),
        ColumnMarginal("Grade_Percentage", "real_valued", mean=0.123, std=2.086, low=-5.0, high=5.0),
    ), max_count=max_count)


def default_zip_process(hour_cycle: bool = True, interaction: bool = True) -> ZipProcess:
    """Traffic volume dominates both links; geometry columns contribute weakly."""
    return ZipProcess(
        inflation_intercept=1.0,
        inflation_weights={"AAHT": -0.5, "Segment_Length": -0.3, "Light_Presence": 0.1},
        rate_intercept=float(np.log(0.65)),
        rate_weights={
            "AAHT": 0.55, "Segment_Length": 0.3, "Number_of_Lanes": 0.1, "Light_Presence": -0.1,
            "Surface_Type": 0.05, "Lane_Width": -0.1, "Curvature_degree": 0.1,
            "Grade_Percentage": -0.1, "Median_Width": -0.05, "Roadway_Width": 0.05,
            "Left_Shoulder_Width": -0.05, "Right_Shoulder_Width": -0.05, "Hour": 0.05,
        },
        hour_cycle=0.5 if hour_cycle else 0.0,
        interaction=-0.25 if interaction else 0.0,
    )


def _draw_features(spec: SimulationSpec, n_rows: int, rng: np.random.Generator) -> pd.DataFrame:
    columns = {spec.target: np.zeros(n_rows, dtype=np.int64)}
    for c in spec.columns:
        columns[c.name] = c.draw(rng, n_rows)
    frame = pd.DataFrame(columns, columns=[spec.target] + spec.feature_names)
    frame.index.name = ROW_ID
    return frame


def _linear_predictors(table: Table, spec: SimulationSpec, process: ZipProcess) -> Tuple[np.ndarray, np.ndarray]:
    names = spec.feature_names
    unknown = set(process.inflation_weights) | set(process.rate_weights)
    unknown -= set(names)
    if unknown:
        raise SchemaError(f"ZIP process weights name unknown columns {sorted(unknown)}")
    if len(table) == 0:
        return np.zeros(0), np.zeros(0)
    z, _, _ = standardize_matrix(numeric_matrix(table, names))
    gamma = np.array([process.inflation_weights.get(n, 0.0) for n in names])
    beta = np.array([process.rate_weights.get(n, 0.0) for n in names])
    inflation = process.inflation_intercept + z @ gamma
    log_rate = process.rate_intercept + z @ beta
    if process.hour_cycle and "Hour" in names:
        hours = table.frame["Hour"].to_numpy(dtype=np.float64)
        log_rate = log_rate + process.hour_cycle * np.cos(2 * np.pi * (hours - process.peak_hour) / 24.0)
    if process.interaction and {"AAHT", "Light_Presence"} <= set(names):
        log_rate = log_rate + process.interaction * z[:, names.index("AAHT")] * z[:, names.index("Light_Presence")]
    return inflation, log_rate


def expected_zero_share(spec: SimulationSpec, process: ZipProcess, n_rows: int, seed: int) -> float:
    """Mean of P(y = 0) over the covariates simulate_zip_table would draw with this seed."""
    rng = np.random.default_rng(seed)
    table = Table(spec.schema(), _draw_features(spec, n_rows, rng))
    inflation, log_rate = _linear_predictors(table, spec, process)
    p = expit(inflation)
    return float(np.mean(p + (1.0 - p) * np.exp(-np.exp(log_rate))))


def calibrate_zero_intercept(spec: SimulationSpec, process: ZipProcess, target_share: float,
                             n_rows: int, seed: int) -> ZipProcess:
    """
    Solve the inflation intercept so the expected zero share hits a target.

    Args:
        spec: Simulation specification
        process: Law whose inflation intercept is replaced
        target_share: Desired share of zero targets
        n_rows: Rows the simulation will draw
        seed: Seed the simulation will use

    Returns:
        ZipProcess with the calibrated intercept

    Raises:
        SchemaError: If the target is unreachable for any intercept
    """
    def gap(intercept):
        return expected_zero_share(spec, replace(process, inflation_intercept=intercept), n_rows, seed) - target_share

    try:
        intercept = brentq(gap, -30.0, 30.0, xtol=1e-10)
    except ValueError:
        raise SchemaError(f"Zero share {target_share} is unreachable under this process") from None
    log.info("Calibrated inflation intercept %.6f for zero share %.3f", intercept, target_share)
    return replace(process, inflation_intercept=float(intercept))


def simulate_zip_table(n_rows: int, spec: SimulationSpec, process: ZipProcess, seed: int) -> Table:
    """
    Draw a table from the zero-inflated Poisson law.

    Args:
        n_rows: Number of rows
        spec: Explanatory marginals and target declaration
        process: Link coefficients
        seed: Random seed; identical seeds give bit-identical tables

    Returns:
        Table whose target is 0 with probability p and Poisson(lambda) otherwise,
        capped at ``spec.max_count``
    """
    if n_rows < 0:
        raise SchemaError(f"n_rows must be non-negative, got {n_rows}")
    rng = np.random.default_rng(seed)
    frame = _draw_features(spec, n_rows, rng)
    table = Table(spec.schema(), frame)
    inflation, log_rate = _linear_predictors(table, spec, process)
    structural_zero = rng.random(n_rows) < expit(inflation)
    counts = np.minimum(rng.poisson(np.exp(log_rate)), spec.max_count)
    frame[spec.target] = np.where(structural_zero, 0, counts).astype(np.int64)
    table = Table(spec.schema(), frame)
    if n_rows:
        log.info("Simulated %d rows, %.1f%% zero targets", n_rows, 100.0 * np.mean(frame[spec.target] == 0))
    return table
