"""Adaptive importance sampling for small permutation-test p-values."""

from .core import ObservedData, StatisticSpec, observed_statistic, statistic_eval
from .errors import (
    AispError,
    ContractViolation,
    DegenerateStatistic,
    InstanceTooLarge,
    NoEliteSamples,
    NonConvergence,
    ThresholdNotReached,
)

__version__ = "0.1.0"

__all__ = [
    "AispError",
    "ContractViolation",
    "DegenerateStatistic",
    "InstanceTooLarge",
    "NoEliteSamples",
    "NonConvergence",
    "ObservedData",
    "StatisticSpec",
    "ThresholdNotReached",
    "observed_statistic",
    "statistic_eval",
]
