"""Exception hierarchy shared by every module."""


class BxvError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(BxvError, ValueError):
    """Array dimensions do not line up."""


class DataError(BxvError, ValueError):
    """Input data is invalid or inconsistent (bad files, unknown ids, ...)."""


class ConfigError(DataError):
    """A config or spec file could not be parsed or validated."""


class NumericalError(BxvError, ArithmeticError):
    """A computation produced non-finite values or hit a singular matrix."""
