"""Bayesian x-vector speaker verification toolkit built on numpy."""

from bxv.errors import BxvError, ConfigError, DataError, NumericalError, ShapeError

__version__ = "0.1.0"

__all__ = [
    "BxvError",
    "ConfigError",
    "DataError",
    "NumericalError",
    "ShapeError",
    "__version__",
]
