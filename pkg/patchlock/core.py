"""Core exception hierarchy for PatchLock.

Every error raised by the library derives from :class:`PatchLockError`, so
callers (and the command-line tool) can separate domain failures from
programming errors with a single ``except`` clause.
"""


class PatchLockError(Exception):
    """Base exception for PatchLock errors."""
    pass


class ShapeError(PatchLockError):
    """Raised when matrix or tensor dimensions do not line up."""
    pass


class GeometryError(ShapeError):
    """Raised when an image cannot be tiled by the requested patch size."""
    pass


class SingularMatrixError(PatchLockError):
    """Raised when a matrix is singular or numerically singular."""
    pass


class KeyGenerationError(PatchLockError):
    """Raised when no acceptable encryption matrix could be derived from a key."""
    pass


class EntropyError(PatchLockError):
    """Raised when the operating system cannot supply random bytes."""
    pass


class InvalidStateError(PatchLockError):
    """Raised when an operation does not fit the object's encryption state.

    For example encrypting weights that are already encrypted.
    """
    pass


class LabelError(PatchLockError):
    """Raised when a segmentation label is outside ``[0, C)`` and not the ignore label."""
    pass


class UndefinedLossError(PatchLockError):
    """Raised when a batch has no labelled pixel to compute a loss on."""
    pass


class TrainingError(PatchLockError):
    """Raised when training diverges."""

    def __init__(self, message: str, iteration: int) -> None:
        super().__init__(message)
        self.iteration = iteration


class StatisticsError(PatchLockError):
    """Raised when summary statistics are requested from too few trials."""
    pass


class FormatError(PatchLockError):
    """Raised when a file does not carry the expected magic or is truncated."""
    pass
