"""Exception hierarchy shared by every module."""


class DttnError(Exception):
    """Base class for all package errors."""


class DimensionError(DttnError, ValueError):
    """Extents, ranks or shapes do not agree."""


class ConfigurationError(DttnError, ValueError):
    """A configuration value is invalid or inconsistent."""


class StateError(DttnError, RuntimeError):
    """An operation was requested in a state that does not permit it."""


class CapacityError(DttnError, ValueError):
    """A tiny-instance size guard was exceeded."""


class FormatError(DttnError, ValueError):
    """A file on disk is malformed or truncated."""


class NumericError(DttnError, ArithmeticError):
    """A numerical procedure failed (non-finite values, ill-conditioning)."""
