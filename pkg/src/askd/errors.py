"""Exception hierarchy shared across the package.

Every error carries the CLI exit code it maps onto:
1 = usage/config, 2 = data, 3 = training/eval failure.
"""


class AskdError(Exception):
    exit_code = 3


class ConfigError(AskdError, ValueError):
    """Invalid configuration value, unknown key, or violated invariant."""

    exit_code = 1


class DataError(AskdError):
    """Unreadable, missing, or malformed input data."""

    exit_code = 2


class DimensionError(DataError, ValueError):
    """Array or tensor shape incompatible with the operation."""


class CheckpointError(DataError):
    """Checkpoint file missing, corrupt, or of an unknown format version."""


class ProtocolError(DataError):
    """Evaluation protocol preconditions violated (folds, labels, k)."""


class AlignmentError(AskdError):
    """Teacher and student attention sites do not line up."""


class NormalizationError(AskdError, ValueError):
    """A vector that must be L2-normalized has (near-)zero norm."""


class TrainingError(AskdError):
    """Training preconditions violated or the optimization loop failed."""
