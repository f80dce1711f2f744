"""Exception taxonomy shared by all corrsig modules."""


class CorrsigError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CorrsigError):
    """Array shapes do not satisfy an operation's contract."""


class ConfigError(CorrsigError):
    """A parameter value is structurally invalid (bad kernel size, stride, config field)."""


class UsageError(CorrsigError):
    """An API was called in an unsupported way (non-scalar backward root, etc.)."""


class DataError(CorrsigError):
    """On-disk data is missing, malformed, or inconsistent with its sidecar."""


class TrainingError(CorrsigError):
    """Training diverged or produced non-finite values."""


class MetricError(CorrsigError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""


class GenerationError(CorrsigError):
    """Synthetic data generation could not satisfy its constraints."""
