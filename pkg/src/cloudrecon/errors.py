"""Exception types shared across the package."""


class CloudReconError(Exception):
    """Base class for all package errors."""


class ConfigError(CloudReconError, ValueError):
    """Invalid configuration or a shape that contradicts the configuration."""


class InputError(CloudReconError, ValueError):
    """Malformed input data (empty, non-finite, mismatched lengths)."""


class DomainError(CloudReconError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class NumericalError(CloudReconError, ArithmeticError):
    """A computation produced a non-finite or otherwise invalid value."""


class LoadError(CloudReconError, OSError):
    """A dataset or checkpoint file is missing, corrupt or of the wrong version."""


class TrainingError(CloudReconError, RuntimeError):
    """Training aborted, e.g. on a non-finite loss."""
