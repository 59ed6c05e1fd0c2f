"""Exception hierarchy shared by every module."""


class MEEGNetError(Exception):
    """Base class for all package errors."""


class ShapeError(MEEGNetError, ValueError):
    pass


class ConfigError(MEEGNetError, ValueError):
    pass


class NumericError(MEEGNetError, ArithmeticError):
    pass


class StateError(MEEGNetError, RuntimeError):
    pass


class FormatError(MEEGNetError, ValueError):
    """Malformed or inconsistent file on disk."""


class EmptySummaryError(MEEGNetError, ValueError):
    pass
