"""Exception types raised by the estimators."""

from __future__ import annotations


class AispError(Exception):
    """Base class for every error raised by this package."""


class ContractViolation(AispError, ValueError):
    """An argument does not satisfy the documented preconditions."""


class DegenerateStatistic(AispError):
    """A t-type statistic hit a zero denominator."""


class NoEliteSamples(AispError):
    """A cross-entropy update was asked to fit an empty elite set."""


class NonConvergence(AispError):
    """Iterative proportional fitting stopped before meeting its tolerance."""

    def __init__(self, message: str, residual: float, sweeps: int):
        super().__init__(message)
        self.residual = residual
        self.sweeps = sweeps


class ThresholdNotReached(AispError):
    """The adaptive phase hit ``max_iters`` before the quantile reached gamma.

    ``gamma_trace`` holds the per-iteration thresholds. ``report`` carries an
    estimate computed from the last proposal anyway, so callers can treat the
    run as an outlier instead of discarding it.
    """

    def __init__(self, message: str, gamma_trace: list[float], report=None):
        super().__init__(message)
        self.gamma_trace = list(gamma_trace)
        self.report = report


class InstanceTooLarge(AispError):
    """Exhaustive enumeration was requested on an oversized instance."""


class MatrixParseError(AispError):
    """An input table could not be parsed; ``row``/``column`` are 1-based."""

    def __init__(self, message: str, row: int | None = None, column: int | None = None):
        super().__init__(message)
        self.row = row
        self.column = column
