"""Exception hierarchy.

The CLI maps these onto exit codes: ``ConfigError`` -> 1, ``DataError`` -> 2,
``NumericalError`` (and subclasses) -> 3.
"""


class PoquimError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PoquimError, ValueError):
    """Invalid configuration, hypothesis, or model specification."""


class DataError(PoquimError, ValueError):
    """Malformed or unusable input data."""


class NumericalError(PoquimError, ArithmeticError):
    """A numerical operation failed (non-SPD matrix, singular system, ...)."""


class RankDeficientError(NumericalError):
    """The fixed-effect design, or X'V^{-1}X, is numerically rank deficient."""


class EnumerationBudgetError(NumericalError):
    """The design is too dense for exact index-class enumeration."""
