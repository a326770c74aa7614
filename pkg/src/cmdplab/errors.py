"""Exception types shared across the package."""


class CmdpLabError(Exception):
    """Base class for all package errors."""


class ShapeError(CmdpLabError):
    """Array dimensions do not match what an operation requires."""


class NumericOverflowError(CmdpLabError):
    """A non-finite value appeared in a computation graph."""


class ParameterError(CmdpLabError):
    """A numeric parameter is outside its valid range."""


class InfeasibleInputError(CmdpLabError):
    """A barrier function was evaluated outside its feasible domain."""


class DomainError(CmdpLabError):
    """An action or input lies outside the declared domain."""


class UnsupportedEnvironmentError(CmdpLabError):
    """The requested operation is not defined for this environment."""


class EmptyBatchError(CmdpLabError):
    """A batch operation received no data."""


class ConfigError(CmdpLabError):
    """Experiment configuration failed validation."""

    def __init__(self, message, path=None):
        self.path = path
        if path:
            message = f"{path}: {message}"
        super().__init__(message)


class CheckpointError(CmdpLabError):
    """A checkpoint is unreadable or incompatible with the requested shapes."""
