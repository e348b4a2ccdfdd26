"""Observed samples, permutation assignments and test statistics.

Assignments are 0/1 arrays. A one-group assignment is a sign vector (1 means
``+x_i``); a two-group assignment is a partition vector (1 means the value
lands in Group 1 of the permuted sample). Every statistic accepts either a
single assignment of shape ``(n,)`` or a batch of shape ``(N, n)`` and uses
the same row-wise reduction in both cases, so the observed statistic and the
permuted statistics are produced by identical arithmetic and exact ties are
preserved.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractViolation, DegenerateStatistic

ONE_GROUP_MEAN = "one-group-mean"
DIFF_MEANS = "diff-means"
STUDENT_T = "student-t"
MODERATED_T = "moderated-t"

STATISTIC_KINDS = (ONE_GROUP_MEAN, DIFF_MEANS, STUDENT_T, MODERATED_T)


@dataclass(frozen=True)
class ObservedData:
    """Observed measurements and their group layout.

    ``group1_size`` is ``None`` for a one-group (or paired-difference) sample.
    For two groups the first ``group1_size`` values are Group 1 and Group 1 is
    never the larger group; use :meth:`two_group` to build one from raw groups
    of any size. ``swapped`` records that the caller's labels were exchanged
    to enforce that ordering.
    """

    values: np.ndarray
    group1_size: Optional[int] = None
    swapped: bool = False

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).ravel()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        n = values.size
        if n < 1:
            raise ContractViolation("observed data must contain at least one value")
        if not np.all(np.isfinite(values)):
            raise ContractViolation("observed values must all be finite")
        if self.group1_size is not None:
            k = int(self.group1_size)
            object.__setattr__(self, "group1_size", k)
            if not 1 <= k <= n - k:
                raise ContractViolation(
                    f"two-group design needs 1 <= k <= m, got k={k}, m={n - k}"
                )
        elif self.swapped:
            raise ContractViolation("a one-group sample cannot be swapped")

    @classmethod
    def one_group(cls, values) -> "ObservedData":
        return cls(values)

    @classmethod
    def two_group(cls, group1, group2) -> "ObservedData":
        """Build a two-group sample, swapping labels if Group 1 is larger."""
        g1 = np.asarray(group1, dtype=np.float64).ravel()
        g2 = np.asarray(group2, dtype=np.float64).ravel()
        if g1.size > g2.size:
            return cls(np.concatenate([g2, g1]), group1_size=g2.size, swapped=True)
        return cls(np.concatenate([g1, g2]), group1_size=g1.size)

    @property
    def n(self) -> int:
        return self.values.size

    @property
    def is_two_group(self) -> bool:
        return self.group1_size is not None

    @property
    def k(self) -> int:
        return self.group1_size if self.group1_size is not None else 0

    @property
    def m(self) -> int:
        return self.n - self.k if self.is_two_group else 0

    def identity_assignment(self) -> np.ndarray:
        """The assignment that reproduces the observed sample."""
        if self.is_two_group:
            d = np.zeros(self.n, dtype=np.int8)
            d[: self.k] = 1
            return d
        return np.ones(self.n, dtype=np.int8)


@dataclass(frozen=True)
class StatisticSpec:
    """Which upper-tail statistic to evaluate.

    ``s0`` is the fudge constant added to the pooled standard error by the
    moderated t-statistic; ``student-t`` is the same statistic with ``s0 = 0``.
    """

    kind: str = DIFF_MEANS
    s0: float = 0.0
    tail: str = field(default="upper", init=False)

    def __post_init__(self):
        if self.kind not in STATISTIC_KINDS:
            raise ContractViolation(
                f"unknown statistic {self.kind!r}; expected one of {STATISTIC_KINDS}"
            )
        if not (np.isfinite(self.s0) and self.s0 >= 0):
            raise ContractViolation(f"s0 must be finite and >= 0, got {self.s0}")

    def check_design(self, data: ObservedData) -> None:
        if self.kind == ONE_GROUP_MEAN and data.is_two_group:
            raise ContractViolation("one-group-mean requires a one-group design")
        if self.kind != ONE_GROUP_MEAN and not data.is_two_group:
            raise ContractViolation(f"{self.kind} requires a two-group design")


def _as_batch(assignment, data: ObservedData) -> tuple[np.ndarray, bool]:
    a = np.asarray(assignment)
    single = a.ndim == 1
    a = np.atleast_2d(a)
    if a.ndim != 2 or a.shape[1] != data.n:
        raise ContractViolation(
            f"assignment shape {np.shape(assignment)} does not match n={data.n}"
        )
    if a.size and (a.min() < 0 or a.max() > 1):
        raise ContractViolation("assignment entries must be 0 or 1")
    if data.is_two_group and a.size:
        sums = a.sum(axis=1)
        if np.any(sums != data.k):
            raise ContractViolation(
                f"partition vectors must contain exactly k={data.k} ones"
            )
    return a, single


def _diff_means(x: np.ndarray, d: np.ndarray, k: int, m: int):
    in1 = d.astype(np.float64)
    in2 = 1.0 - in1
    mean1 = (in1 * x).sum(axis=1) / k
    mean2 = (in2 * x).sum(axis=1) / m
    return mean1, mean2, in1, in2


def statistic_eval(spec: StatisticSpec, data: ObservedData, assignment):
    """Evaluate the statistic on the permuted sample(s) induced by ``assignment``.

    Returns a float for a single assignment and a 1-D array for a batch.
    """
    spec.check_design(data)
    a, single = _as_batch(assignment, data)
    x = data.values

    if spec.kind == ONE_GROUP_MEAN:
        signs = 2.0 * a.astype(np.float64) - 1.0
        out = (signs * x).sum(axis=1) / data.n
    else:
        k, m = data.k, data.m
        mean1, mean2, in1, in2 = _diff_means(x, a, k, m)
        diff = mean1 - mean2
        if spec.kind == DIFF_MEANS:
            out = diff
        else:
            if k + m <= 2:
                raise DegenerateStatistic("t-statistic needs at least 3 observations")
            ss1 = (in1 * (x - mean1[:, None]) ** 2).sum(axis=1)
            ss2 = (in2 * (x - mean2[:, None]) ** 2).sum(axis=1)
            pooled_var = (ss1 + ss2) / (k + m - 2)
            se = np.sqrt(pooled_var * (1.0 / k + 1.0 / m))
            denom = se + spec.s0
            if np.any(denom <= 0):
                raise DegenerateStatistic(
                    "zero pooled standard error with s0 = 0: the feature is "
                    "constant within both permuted groups"
                )
            out = diff / denom
        if data.swapped:
            out = -out

    return float(out[0]) if single else out


def observed_statistic(spec: StatisticSpec, data: ObservedData) -> float:
    """The statistic at the identity assignment (the threshold gamma)."""
    return statistic_eval(spec, data, data.identity_assignment())
