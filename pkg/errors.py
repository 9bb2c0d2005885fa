"""Exception and warning classes shared by every module."""

from typing import Optional


class OarError(Exception):
    """Base class for all errors raised by this package"""


class DomainError(OarError, ValueError):
    """Argument outside the mathematical domain of a function"""


class ShapeMismatchError(OarError, ValueError):
    """Inconsistent array shapes or a cache that does not match its network"""


class NumericalDegeneracyError(OarError, ArithmeticError):
    """Division by a vanishing quantity or an unsolvable linear system"""


class ConfigError(OarError, ValueError):
    """Unknown or malformed configuration key"""


class UsageError(OarError):
    """Command-line usage problem"""


class DatasetParseError(OarError, ValueError):
    """A dataset file could not be parsed; names the offending row and column"""

    def __init__(self, message: str, path: Optional[str] = None,
                 row: Optional[int] = None, column: Optional[str] = None):
        self.path = path
        self.row = row
        self.column = column
        where = []
        if path is not None:
            where.append(f"file {path}")
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column '{column}'")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class DegenerateOverlapWarning(UserWarning):
    """Treatment is constant or the propensity collapsed to 0 or 1"""


class CoverageWarning(UserWarning):
    """A treatment arm has no samples, so its outcome head was never trained"""


class DegenerateRescalingWarning(UserWarning):
    """Mean dropout probability is 0 or 1, rescaling fell back to the base level"""


class KernelChoiceWarning(UserWarning):
    """Regularization function not intended for the RKHS penalty"""
