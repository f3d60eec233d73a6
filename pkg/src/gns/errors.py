"""Exception types shared across the package.

The CLI maps these onto exit codes: usage/config problems -> 1,
data/format problems -> 2, numeric failures -> 3.
"""


class GnsError(Exception):
    """Base class for all package errors."""


class ConfigError(GnsError):
    """Invalid or inconsistent configuration (unknown keys, bad values)."""


class DimensionError(GnsError):
    """Tensor shapes incompatible with the requested operation."""


class ScatterIndexError(GnsError):
    """Scatter/gather index outside the valid node range."""


class DataError(GnsError):
    """Malformed input data (non-finite coordinates, short trajectories...)."""


class FormatError(GnsError):
    """Corrupt or truncated on-disk file; carries the failing byte offset."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(GnsError):
    """Non-finite loss/gradients or other unrecoverable optimizer state."""


class RolloutError(GnsError):
    """Simulation blow-up; keeps the partial rollout for diagnosis."""

    def __init__(self, message, step=None, partial=None):
        super().__init__(message)
        self.step = step
        self.partial = partial


class GenerationError(GnsError):
    """Ground-truth scenario integration became unstable."""
