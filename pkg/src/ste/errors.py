"""Exception types shared across the package."""


class SteError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(SteError):
    """An argument violates a documented precondition (shape, range, ...)."""


class NumericError(SteError):
    """A computation produced a non-finite value."""


class ConvergenceError(SteError):
    """An iterative solver did not reach its tolerance.

    Carries the final residual in ``residual``.
    """

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


class PlacementError(SteError):
    """No blank region can host the requested text instance."""


class ContractError(SteError):
    """An operation was called in a state that violates its contract."""


class ManifestError(SteError):
    """A manifest file failed validation; message names the line."""


class ConfigError(SteError):
    """A config file or flag value failed validation."""


class CheckpointFormatError(SteError):
    """A checkpoint file is malformed, truncated, or has a bad version."""
