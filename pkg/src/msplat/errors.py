"""Exception hierarchy.

Every error raised by the package derives from :class:`MsplatError`. The CLI
maps the two families below onto exit codes: :class:`DataError` -> 3 and
:class:`NumericError` -> 4.
"""


class MsplatError(Exception):
    """Base class for all package errors."""


class DataError(MsplatError, ValueError):
    """Bad or inconsistent input data (files, shapes, bands, indices)."""


class NumericError(MsplatError, ArithmeticError):
    """A computation is undefined for the given values."""


class InvalidRotationError(NumericError):
    pass


class InvalidDirectionError(NumericError):
    pass


class InsufficientPointsError(DataError):
    pass


class DimensionMismatchError(DataError):
    pass


class StaleCacheError(DataError):
    pass


class ChannelMismatchError(DataError):
    pass


class BandNotFoundError(DataError):
    pass


class EmptyViewsError(DataError):
    pass


class WindowSizeError(DataError):
    pass


class IndexOutOfRangeError(DataError):
    pass


class UnsupportedCameraModelError(DataError):
    pass


class ManifestError(DataError):
    pass


class CheckpointError(DataError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class UndefinedSpectrumError(NumericError):
    pass


class UndefinedCorrelationError(NumericError):
    pass


class NonPositiveSumError(NumericError):
    pass


class NoSignalError(NumericError):
    pass


class NonFiniteLossError(NumericError):
    pass
