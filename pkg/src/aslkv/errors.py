"""Exception hierarchy shared by every aslkv module."""


class AslkvError(Exception):
    """Base class for all library errors."""


class ConfigError(AslkvError, ValueError):
    """A configuration violates its invariants."""


class ArgumentError(AslkvError, ValueError):
    """An operation received arguments outside its domain."""


class DataError(AslkvError, ValueError):
    """Input data is malformed (NaN scores, out-of-vocab ids, ...)."""


class StateError(AslkvError, RuntimeError):
    """A stateful object was used out of order."""


class NumericError(AslkvError, ArithmeticError):
    """A forward pass produced non-finite values."""


class FormatError(AslkvError, ValueError):
    """A trace or report file cannot be decoded."""
