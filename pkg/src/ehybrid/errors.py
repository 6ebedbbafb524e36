"""Exception hierarchy shared across the package."""


class EHybridError(Exception):
    """Base class for all package errors."""


class ConfigError(EHybridError, ValueError):
    """Invalid configuration or parameters."""


class ShapeError(EHybridError, ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class TapeError(EHybridError, RuntimeError):
    """Misuse of a gradient tape (e.g. backward on a consumed tape)."""


class FormatError(EHybridError, ValueError):
    """A binary or text file does not match its declared format."""


class TrainingDiverged(EHybridError, RuntimeError):
    """Loss became non-finite during training."""
