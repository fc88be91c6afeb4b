import numpy as np
import pandas as pd
import pytest

from crashsynth.config import DiffusionConfig, VaeConfig
from crashsynth.data_schema import ROW_ID, ColumnSchema, Table, TableSchema
from crashsynth.simulator import ColumnMarginal, SimulationSpec, ZipProcess, simulate_zip_table


def make_schema() -> TableSchema:
    return TableSchema((
        ColumnSchema("Total_Crash", "count", (0, 1, 2, 3), role="target"),
        ColumnSchema("Hour", "ordinal", (0, 1, 2)),
        ColumnSchema("Light_Presence", "nominal", (0, 1)),
        ColumnSchema("AAHT", "real_valued"),
        ColumnSchema("Segment_Length", "real_valued"),
    ))


def make_table(n: int = 40, seed: int = 0, fitted: bool = True) -> Table:
    rng = np.random.default_rng(seed)
    frame = pd.DataFrame({
        "Total_Crash": rng.choice([0, 0, 0, 1, 2, 3], size=n).astype(np.int64),
        "Hour": rng.integers(0, 3, size=n).astype(np.int64),
        "Light_Presence": rng.integers(0, 2, size=n).astype(np.int64),
        "AAHT": rng.normal(3.0, 1.5, size=n),
        "Segment_Length": rng.uniform(0.05, 1.0, size=n),
    })
    frame.index = pd.Index(np.arange(n), name=ROW_ID)
    schema = make_schema()
    if fitted:
        schema = schema.fit(frame)
    return Table(schema, frame)


def small_spec() -> SimulationSpec:
    return SimulationSpec(columns=(
        ColumnMarginal("Light_Presence", "nominal", (0, 1), (0.7, 0.3)),
        ColumnMarginal("AAHT", "real_valued", mean=2.7, std=1.75, low=0.0001, high=8.6),
        ColumnMarginal("Segment_Length", "real_valued", mean=0.13, std=0.12, low=0.05, high=1.1),
        ColumnMarginal("Lane_Width", "real_valued", mean=12.4, std=1.3, low=11.0, high=22.0),
    ), max_count=12)


def small_process() -> ZipProcess:
    return ZipProcess(
        inflation_intercept=0.8,
        inflation_weights={"AAHT": -0.6, "Light_Presence": 0.3},
        rate_intercept=float(np.log(1.2)),
        rate_weights={"AAHT": 0.5, "Segment_Length": 0.25, "Lane_Width": -0.2},
    )


@pytest.fixture
def schema() -> TableSchema:
    return make_schema().fit(make_table(fitted=False).frame)


@pytest.fixture
def table() -> Table:
    return make_table()


@pytest.fixture
def simulated() -> Table:
    return simulate_zip_table(2000, small_spec(), small_process(), seed=3)


@pytest.fixture
def tiny_vae_config() -> VaeConfig:
    return VaeConfig(d=4, heads=2, epochs=3, batch_size=16, lr=1e-3)


@pytest.fixture
def tiny_diffusion_config() -> DiffusionConfig:
    return DiffusionConfig(d_hidden=16, n_frequencies=8, epochs=3, batch_size=16, steps=5)
