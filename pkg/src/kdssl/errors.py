"""Exception hierarchy shared by every kdssl module."""


class KDSSLError(Exception):
    """Base class for all errors raised by kdssl."""


class InvalidParameterError(KDSSLError, ValueError):
    """A scalar hyperparameter is outside its valid domain."""


class InvalidInputError(KDSSLError, ValueError):
    """Array data has the wrong shape or contains non-finite values."""


class ConfigurationError(KDSSLError, ValueError):
    """A dataset, model or experiment configuration cannot be honoured."""


class InvalidStateError(KDSSLError, RuntimeError):
    """An object was used in a state that does not allow the operation."""


class ParseError(KDSSLError, ValueError):
    """A file on disk is malformed."""


class DatasetValidationError(KDSSLError, ValueError):
    """A well-formed dataset file violates a declared constraint."""


class TrainingDivergenceError(KDSSLError, FloatingPointError):
    """Training produced non-finite losses or gradients."""

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class CheckpointVersionError(KDSSLError, RuntimeError):
    """A checkpoint was written by an incompatible format version."""
