"""
Exception hierarchy shared by every crashsynth module.

Each error carries a machine-readable ``category`` and the exit code the CLI
uses when the error escapes a stage.
"""


class CrashSynthError(Exception):
    """Base class for all crashsynth failures."""

    category = "internal"
    exit_code = 1


class ConfigError(CrashSynthError):
    """Invalid or unknown configuration keys and values."""

    category = "config"
    exit_code = 2


class SchemaError(CrashSynthError):
    """Schema declarations that are inconsistent, unfitted or mismatched."""

    category = "schema"
    exit_code = 3


class DataError(CrashSynthError):
    """Cell-level problems in tabular input (bad numbers, unknown categories)."""

    category = "data"
    exit_code = 4


class ShapeError(CrashSynthError):
    """Tensor or matrix shapes that do not fit the requested operation."""

    category = "shape"
    exit_code = 5


class NumericalError(CrashSynthError):
    """NaN or Inf produced by a computation."""

    category = "numerical"
    exit_code = 6


class ConvergenceError(CrashSynthError):
    """An iterative fitter stopped without meeting its tolerance."""

    category = "convergence"
    exit_code = 7

    def __init__(self, message: str, trajectory=None):
        super().__init__(message)
        self.trajectory = list(trajectory or [])


class GenerationError(CrashSynthError):
    """Synthetic row generation could not satisfy its filters within budget."""

    category = "generation"
    exit_code = 8


class ArtifactError(CrashSynthError):
    """An upstream artifact (file, checkpoint) is missing or incompatible."""

    category = "artifact"
    exit_code = 9
