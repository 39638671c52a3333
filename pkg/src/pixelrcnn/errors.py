"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: ``NumericError`` exits 3, everything
else derived from ``PixelRcnnError`` exits 2.
"""


class PixelRcnnError(Exception):
    """Base class for all library errors."""


class ShapeError(PixelRcnnError, ValueError):
    pass


class ParameterError(PixelRcnnError, ValueError):
    pass


class DataError(PixelRcnnError, ValueError):
    pass


class InsufficientDataError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class FormatError(PixelRcnnError, ValueError):
    """Bad magic number or unsupported version in a binary file."""


class CorruptionError(FormatError):
    """File ended early or carries trailing garbage."""


class UsageError(PixelRcnnError, RuntimeError):
    pass


class UndefinedMetricError(PixelRcnnError, ArithmeticError):
    pass


class NumericError(PixelRcnnError, ArithmeticError):
    """Non-finite value met where a finite one is required."""
