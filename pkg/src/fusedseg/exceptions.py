"""Exception hierarchy shared across the package."""


class FusedSegError(Exception):
    """Base class for all package errors."""


class ConfigurationError(FusedSegError, ValueError):
    pass


class InvalidPromptError(FusedSegError, ValueError):
    pass


class NumericError(FusedSegError, FloatingPointError):
    """Raised when a tensor or loss component is not finite."""


class CheckpointFormatError(FusedSegError):
    pass


class IncompatibleCheckpointError(FusedSegError):
    """A checkpoint does not match the parameter registry of a config.

    ``tensor_name`` carries the first offending tensor.
    """

    def __init__(self, message, tensor_name=None):
        super().__init__(message)
        self.tensor_name = tensor_name

