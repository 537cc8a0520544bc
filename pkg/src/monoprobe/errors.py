class MonoprobeError(Exception):
    """Base class for all errors raised by monoprobe."""


class ValidationError(MonoprobeError, ValueError):
    """Bad argument or configuration value."""


class DimensionError(ValidationError):
    """Tensor shape mismatch; the message names the offending axis."""


class RangeError(ValidationError):
    """Pixel values outside the declared value range."""


class ConfigError(ValidationError):
    """Inconsistent configuration (unknown tap, pooling grid, variant mismatch)."""


class BoundsError(ValidationError, IndexError):
    """Sample index outside [0, d)."""


class UsageError(MonoprobeError):
    """API used in an unsupported way, e.g. backward on a non-scalar."""


class StateError(MonoprobeError):
    """Corrupted internal state such as a nonpositive batch-norm running variance."""


class StructureError(MonoprobeError):
    """Network structure does not allow the requested transformation."""


class FormatError(MonoprobeError):
    """Unreadable or corrupted checkpoint file."""


class TrainingDivergedError(MonoprobeError):
    """NaN or inf met during optimisation."""

    def __init__(self, message, param=None, epoch=None, step=None):
        super().__init__(message)
        self.param = param
        self.epoch = epoch
        self.step = step
