"""
Configuration module for crashsynth.
Contains constants, per-stage settings and the shared run configuration.
"""

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import toml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigError

# --- Constants ---
PROVENANCE_COLUMN = "__synthetic"
DEFAULT_CONFIG_ENV = "CRASHSYNTH_CONFIG"
LOG_LEVEL_ENV = "CRASHSYNTH_LOG_LEVEL"
CHECKPOINT_MAGIC = b"CSYNCKPT"
CHECKPOINT_VERSION = 1
SUPPORTED_KINDS = ["count", "ordinal", "nominal", "real_valued"]
DISCRETE_KINDS = ["count", "ordinal", "nominal"]


@dataclass
class Config:
    """Library-wide numerical settings."""
    MAX_COUNT_CARDINALITY: int = 32
    EXACT_SHAPLEY_MAX_FEATURES: int = 16
    GRAD_CHECK_STEP: float = 1e-4
    GRAD_CHECK_FLOOR: float = 1e-5
    ALPHA_GRID: List[float] = None
    ADAM_BETAS: Tuple[float, float] = (0.9, 0.999)
    ADAM_EPS: float = 1e-8

    def __post_init__(self):
        if self.ALPHA_GRID is None:
            self.ALPHA_GRID = [round(0.05 * k, 2) for k in range(1, 20)]


@dataclass
class OutputLayout:
    """Relative locations of stage artifacts inside the output directory."""
    DATA_DIR: str = "data"
    CHECKPOINT_DIR: str = "checkpoints"
    GENERATED_DIR: str = "generated"
    REBALANCED_DIR: str = "rebalanced"
    QUALITY_DIR: str = "quality"
    MODEL_DIR: str = "models"
    REPORT_DIR: str = "reports"
    EXPLAIN_DIR: str = "explain"
    MANIFEST_DIR: str = "manifests"
    STAGES: List[str] = field(default_factory=lambda: [
        "simulate", "split", "train-vae", "train-diffusion", "generate", "rebalance",
        "eval-quality", "fit-predictor", "fit-zip", "evaluate", "explain",
    ])


def get_env_config() -> dict:
    """Get environment-based configuration."""
    return {
        "config_path": os.getenv(DEFAULT_CONFIG_ENV, ""),
        "log_level": os.getenv(LOG_LEVEL_ENV, "INFO"),
    }


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class PathsConfig(_Section):
    out_dir: str = "runs/default"
    data: Optional[str] = None
    schema_path: Optional[str] = Field(default=None, alias="schema")

    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class SeedsConfig(_Section):
    simulate: int = 17
    split: int = 23
    vae: int = 101
    diffusion: int = 202
    generate: int = 303
    quality: int = 404
    predictor: int = 505
    explain: int = 606


class SimulateConfig(_Section):
    n_rows: int = Field(default=17856, ge=0)
    target_zero_share: Optional[float] = Field(default=0.848, gt=0.0, lt=1.0)
    max_count: int = Field(default=12, ge=1)
    hour_cycle: bool = True
    aaht_light_interaction: bool = True


class SplitConfig(_Section):
    train_fraction: float = Field(default=0.7, gt=0.0, lt=1.0)
    stratify: bool = True


class VaeConfig(_Section):
    d: int = Field(default=8, ge=1)
    heads: int = Field(default=2, ge=1)
    ffn_multiplier: int = Field(default=4, ge=1)
    epochs: int = Field(default=200, ge=1)
    batch_size: int = Field(default=64, ge=1)
    lr: float = Field(default=1e-3, gt=0.0)
    beta_schedule: Literal["adaptive", "constant"] = "adaptive"
    beta: float = Field(default=1e-2, ge=0.0)
    beta_min: float = Field(default=1e-5, ge=0.0)
    beta_patience: int = Field(default=5, ge=1)


class DiffusionConfig(_Section):
    d_hidden: int = Field(default=128, ge=1)
    n_frequencies: int = Field(default=64, ge=1)
    sigma_min: float = Field(default=0.002, gt=0.0)
    sigma_max: float = Field(default=20.0, gt=0.0)
    epochs: int = Field(default=500, ge=1)
    batch_size: int = Field(default=256, ge=1)
    lr: float = Field(default=1e-3, gt=0.0)
    steps: int = Field(default=50, ge=1)
    deterministic: bool = False


class RebalanceConfig(_Section):
    ratio: float = Field(default=1.0, gt=0.0)
    method: Literal["vae-diffusion", "random", "marginal"] = "vae-diffusion"
    attempts_factor: int = Field(default=10, ge=1)
    min_acceptance: float = Field(default=0.5, ge=0.0, le=1.0)


class QualityConfig(_Section):
    folds: int = Field(default=5, ge=2)
    iterations: int = Field(default=500, ge=1)
    lr: float = Field(default=0.1, gt=0.0)
    bins: int = Field(default=30, ge=1)
    columns: List[str] = Field(default_factory=list)
    joint_pairs: List[List[str]] = Field(default_factory=lambda: [
        ["Total_Crash", "Light_Presence"],
        ["Total_Crash", "Hour"],
        ["Lane_Width", "Segment_Length"],
    ])


class GbtConfig(_Section):
    n_trees: int = Field(default=100, ge=0)
    max_depth: int = Field(default=3, ge=1)
    lr: float = Field(default=0.1, gt=0.0)
    min_leaf: int = Field(default=5, ge=1)
    max_bins: int = Field(default=256, ge=2)


class PredictorConfig(_Section):
    folds: int = Field(default=3, ge=2)
    grid: Dict[str, List[Any]] = Field(default_factory=lambda: {
        "n_trees": [100, 300],
        "max_depth": [3, 5],
        "lr": [0.05, 0.1],
        "min_leaf": [5],
    })


class ZipConfig(_Section):
    max_iter: int = Field(default=500, ge=1)
    tol: float = Field(default=1e-8, gt=0.0)
    ridge: float = Field(default=1e-6, ge=0.0)


class ExplainConfig(_Section):
    model: Literal["gbt_original", "gbt_balanced"] = "gbt_balanced"
    mode: Literal["exact", "sampled"] = "sampled"
    background_size: int = Field(default=128, ge=1)
    n_permutations: int = Field(default=100, ge=1)
    n_rows: int = Field(default=100, ge=1)
    feature: str = "AAHT"
    interaction_feature: str = "Light_Presence"
    sort_dependence: bool = True


class RunConfig(_Section):
    """Single configuration shared by all subcommands, one section per stage."""
    paths: PathsConfig = Field(default_factory=PathsConfig)
    seeds: SeedsConfig = Field(default_factory=SeedsConfig)
    simulate: SimulateConfig = Field(default_factory=SimulateConfig)
    split: SplitConfig = Field(default_factory=SplitConfig)
    vae: VaeConfig = Field(default_factory=VaeConfig)
    diffusion: DiffusionConfig = Field(default_factory=DiffusionConfig)
    rebalance: RebalanceConfig = Field(default_factory=RebalanceConfig)
    quality: QualityConfig = Field(default_factory=QualityConfig)
    predictor: PredictorConfig = Field(default_factory=PredictorConfig)
    zip: ZipConfig = Field(default_factory=ZipConfig)
    explain: ExplainConfig = Field(default_factory=ExplainConfig)

    @property
    def out_dir(self) -> Path:
        return Path(self.paths.out_dir)


def parse_override_value(raw: str) -> Any:
    """
    Interpret a command-line override the way a TOML value would be read.

    Args:
        raw: Text after the ``=`` of ``--stage.key=value``

    Returns:
        Parsed value; bare words fall back to strings
    """
    try:
        return toml.loads(f"value = {raw}")["value"]
    except toml.TomlDecodeError:
        return raw


def _merge(base: Dict[str, Any], updates: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in updates.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def build_run_config(file_values: Optional[Dict[str, Any]] = None,
                     seed: Optional[int] = None,
                     out_dir: Optional[str] = None,
                     overrides: Optional[Dict[str, str]] = None) -> RunConfig:
    """
    Assemble a RunConfig from file values, flags and per-stage overrides.

    Args:
        file_values: Parsed TOML document (or None for defaults)
        seed: When given, every named seed is replaced by this value
        out_dir: When given, replaces ``paths.out_dir``
        overrides: Mapping of ``stage.key`` to raw override text

    Returns:
        Validated RunConfig

    Raises:
        ConfigError: Unknown sections or keys, or values failing validation
    """
    values = dict(file_values or {})
    if seed is not None:
        values = _merge(values, {"seeds": {name: seed for name in SeedsConfig.model_fields}})
    if out_dir is not None:
        values = _merge(values, {"paths": {"out_dir": out_dir}})
    for dotted, raw in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if not key:
            raise ConfigError(f"Override '{dotted}' must have the form stage.key=value")
        values = _merge(values, {section: {key: parse_override_value(raw)}})
    try:
        return RunConfig.model_validate(values)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def load_run_config(path: Optional[Path] = None, **kwargs) -> RunConfig:
    """
    Load the shared TOML run file, falling back to defaults when no file is named.

    Args:
        path: TOML file; ``CRASHSYNTH_CONFIG`` is consulted when None
        **kwargs: Forwarded to :func:`build_run_config`

    Returns:
        Validated RunConfig
    """
    if path is None:
        env_path = get_env_config()["config_path"]
        path = Path(env_path) if env_path else None
    file_values = {}
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"Config file not found at '{path}'")
        try:
            file_values = toml.load(path)
        except toml.TomlDecodeError as e:
            raise ConfigError(f"Config file '{path}' is not valid TOML: {e}") from e
    return build_run_config(file_values, **kwargs)


# Global instances
app_config = Config()
output_layout = OutputLayout()
