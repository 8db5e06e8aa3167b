"""Exception hierarchy shared by the package."""


class DebiasError(Exception):
    """Base class for all package errors."""


class UsageError(DebiasError):
    """A function was called with arguments violating its contract."""


class ConfigError(DebiasError):
    """Invalid configuration value."""


class DataError(DebiasError):
    """Malformed or inconsistent data."""


class SchemaError(DataError):
    """A record is missing a required field."""


class MetricError(DebiasError):
    """A metric is undefined for the given inputs."""


class NumericError(DebiasError):
    """A computation produced NaN or infinite values."""


class CheckpointError(DebiasError):
    """A checkpoint file is corrupted, truncated or of the wrong version."""


class ShapeError(DebiasError):
    """Operand shapes are incompatible for an operation."""

    def __init__(self, op: str, left, right):
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)
        super().__init__(f"{op}: incompatible shapes {self.left} and {self.right}")
