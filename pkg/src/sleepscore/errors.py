"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes (config 1, data 2, numeric 3).
"""


class SleepScoreError(Exception):
    """Base class for all package errors."""


class ShapeError(SleepScoreError, ValueError):
    """Array dimensions are inconsistent with the operation's contract."""


class DomainError(SleepScoreError, ValueError):
    """A value is outside the set an operation accepts (e.g. a bad class index)."""


class NumericError(SleepScoreError, ArithmeticError):
    """A computation produced or received non-finite values."""


class ConfigError(SleepScoreError, ValueError):
    """A configuration file or option is invalid; the message names the key."""


class DataError(SleepScoreError, ValueError):
    """Input data files are missing, malformed, or mutually inconsistent."""
