"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError (and
subclasses) -> 3, TrainingError (and subclasses) -> 4.
"""


class CurvprivError(Exception):
    """Base class for all package errors."""


class ConfigError(CurvprivError):
    """Invalid or inconsistent run configuration."""


class DataError(CurvprivError):
    """Problem with input data or missing upstream artifacts."""


class FormatError(DataError):
    """Malformed on-disk container (IDX file, checkpoint blob)."""


class ContractError(DataError):
    """A documented precondition was violated by the caller."""


class DimensionError(CurvprivError, ValueError):
    """Incompatible tensor shapes; message names both shapes."""


class TrainingError(CurvprivError):
    """Non-finite losses/gradients or other optimization failure."""


class GeometryError(TrainingError):
    """Metric/curvature/geodesic computation failed at a latent point."""


class ObfuscationError(TrainingError):
    """Perturbation could not be applied to a sample."""
