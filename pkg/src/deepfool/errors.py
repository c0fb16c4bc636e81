"""Exception types shared across the package."""


class DeepFoolError(Exception):
    """Base class for all package errors."""


class DimensionError(DeepFoolError, ValueError):
    """Raised when array shapes do not chain or do not match a model."""


class DegenerateGradientError(DeepFoolError, ArithmeticError):
    """Raised when every candidate gradient gap is below the tolerance."""


class ModelFormatError(DeepFoolError, ValueError):
    """Raised when a model file is corrupt, truncated or unsupported."""


class DataFormatError(DeepFoolError, ValueError):
    """Raised when a dataset file cannot be parsed.

    ``offset`` is the byte offset where parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(DeepFoolError, RuntimeError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class ConfigError(DeepFoolError, ValueError):
    """Raised for invalid attack, experiment or argument configuration."""
