"""Exception hierarchy shared by every gmgan module."""


class GmganError(Exception):
    """Base class; the CLI turns these into one-line error reports."""


class DimensionError(GmganError, ValueError):
    pass


class NumericError(GmganError, ArithmeticError):
    pass


class UsageError(GmganError, RuntimeError):
    pass


class ParameterError(GmganError, ValueError):
    pass


class UnsupportedModalityError(ParameterError):
    pass


class FormatError(GmganError, ValueError):
    """Malformed file; ``offset`` is the byte offset where parsing failed, if known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
