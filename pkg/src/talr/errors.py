"""Exception types shared across the package.

The CLI maps these onto exit codes: usage errors exit 2, data errors exit 3
and numeric failures exit 4.
"""


class TalrError(Exception):
    """Base class for all package errors."""


class DataError(TalrError, ValueError):
    """Malformed, mismatched or out-of-range input data."""


class DimensionError(DataError):
    """Arrays or codebooks whose shapes or bit widths do not agree."""


class UnknownLevelError(DataError):
    """An affinity value outside the declared level set."""


class UndefinedMetricError(TalrError, ValueError):
    """The metric is undefined for this query (no relevant items / zero gains)."""


class NumericError(TalrError, ArithmeticError):
    """Non-finite values, failed quadrature or diverging optimisation."""


class CombinatorialGuardError(TalrError, ValueError):
    """Exhaustive enumeration would exceed the configured permutation budget."""
