"""Exception types shared across the package."""


class EdgeFbgError(Exception):
    """Base class for all package errors."""


class InvalidInputError(EdgeFbgError, ValueError):
    """Arguments violate an operation's preconditions."""


class OutOfRangeError(InvalidInputError):
    """A query point lies outside the valid domain."""


class InsufficientExcitationError(InvalidInputError):
    """Calibration data does not excite enough bend states to fit."""


class CalibrationDegenerateError(EdgeFbgError):
    """A fitted calibration cannot be inverted (e.g. zero base intensity)."""


class BatchTooSmallError(InvalidInputError):
    """Training-mode batch statistics need at least two samples."""


class StateError(EdgeFbgError, RuntimeError):
    """Operation invoked out of order (e.g. backward before forward)."""


class TrainingDivergedError(EdgeFbgError, RuntimeError):
    """Loss or gradients became non-finite during optimization."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class SearchFailedError(EdgeFbgError, RuntimeError):
    """Every trial in a hyperparameter search diverged."""


class DataFormatError(EdgeFbgError, ValueError):
    """A persisted file is corrupt, truncated, or of the wrong version."""
