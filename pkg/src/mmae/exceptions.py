"""Exception hierarchy.

``ValidationError`` subclasses signal bad input or configuration (CLI exit
code 1); everything else under ``MmaeError`` is a runtime failure (exit 2).
"""


class MmaeError(Exception):
    """Base class for all package errors."""


class ValidationError(MmaeError, ValueError):
    """Invalid input, configuration or arguments."""


class ConfigError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class AlignmentError(ValidationError):
    """Modality matrices disagree on the number of rows."""


class RankError(ValidationError):
    pass


class InsufficientDataError(ValidationError):
    pass


class EmptyDatasetError(ValidationError):
    pass


class BatchTooSmallError(ValidationError):
    """Train-mode batch norm needs at least two rows."""


class DataError(ValidationError):
    """Non-finite or otherwise unusable values."""


class FormatError(MmaeError):
    """Malformed array file (bad magic or header)."""


class UnsupportedArrayError(FormatError):
    """Well-formed array file whose dtype/rank/order is not supported."""


class CheckpointError(MmaeError):
    pass


class TapeError(MmaeError):
    """Backward called with a tape that does not belong to the forward pass."""


class NumericsError(MmaeError):
    pass


class MetricUndefinedError(MmaeError):
    pass


class IoError(MmaeError, OSError):
    pass
