"""Ground-truth p-values: exhaustive enumeration and crude Monte Carlo."""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass

import numpy as np

from .core import ObservedData, StatisticSpec, observed_statistic, statistic_eval
from .engine import PHASE_CRUDE, EstimateReport, derive_rng
from .errors import ContractViolation, InstanceTooLarge

MAX_SIGN_N = 24
MAX_PARTITIONS = 10**7
_ENUM_CHUNK = 1 << 16


@dataclass(frozen=True)
class ExactResult:
    """``p = count / total`` over the full permutation space."""

    p: float
    count: int
    total: int


def exact_pvalue_onegroup(data: ObservedData, spec: StatisticSpec) -> ExactResult:
    """Enumerate all ``2**n`` sign assignments."""
    if data.is_two_group:
        raise ContractViolation("exact_pvalue_onegroup needs a one-group design")
    n = data.n
    if n > MAX_SIGN_N:
        raise InstanceTooLarge(f"2**{n} sign vectors exceed the n <= {MAX_SIGN_N} cap")
    gamma = observed_statistic(spec, data)
    total = 1 << n
    bits = np.arange(n, dtype=np.int64)
    count = 0
    for lo in range(0, total, _ENUM_CHUNK):
        codes = np.arange(lo, min(lo + _ENUM_CHUNK, total), dtype=np.int64)
        signs = ((codes[:, None] >> bits) & 1).astype(np.int8)
        count += int(np.count_nonzero(statistic_eval(spec, data, signs) >= gamma))
    return ExactResult(count / total, count, total)


def _partition_chunks(n: int, k: int, chunk: int):
    combos = itertools.combinations(range(n), k)
    rows = np.arange(chunk)
    while True:
        flat = np.fromiter(
            itertools.chain.from_iterable(itertools.islice(combos, chunk)), dtype=np.int64
        )
        if flat.size == 0:
            return
        idx = flat.reshape(-1, k)
        d = np.zeros((idx.shape[0], n), dtype=np.int8)
        d[rows[: idx.shape[0], None], idx] = 1
        yield d


def exact_pvalue_twogroup(data: ObservedData, spec: StatisticSpec) -> ExactResult:
    """Enumerate all ``C(n, k)`` partitions of the pooled sample."""
    if not data.is_two_group:
        raise ContractViolation("exact_pvalue_twogroup needs a two-group design")
    n, k = data.n, data.k
    total = math.comb(n, k)
    if total > MAX_PARTITIONS:
        raise InstanceTooLarge(f"C({n}, {k}) = {total} partitions exceed {MAX_PARTITIONS}")
    gamma = observed_statistic(spec, data)
    count = visited = 0
    for d in _partition_chunks(n, k, _ENUM_CHUNK):
        visited += d.shape[0]
        count += int(np.count_nonzero(statistic_eval(spec, data, d) >= gamma))
    assert visited == total
    return ExactResult(count / total, count, total)


def exact_pvalue(data: ObservedData, spec: StatisticSpec) -> ExactResult:
    if data.is_two_group:
        return exact_pvalue_twogroup(data, spec)
    return exact_pvalue_onegroup(data, spec)


def uniform_partitions(rng: np.random.Generator, n: int, k: int, size: int) -> np.ndarray:
    """Uniformly random k-subsets, as the first k slots of random shuffles."""
    keys = rng.random((size, n))
    picked = np.argpartition(keys, k - 1, axis=1)[:, :k] if k < n else np.tile(np.arange(n), (size, 1))
    d = np.zeros((size, n), dtype=np.int8)
    d[np.arange(size)[:, None], picked] = 1
    return d


def crude_pvalue(
    data: ObservedData,
    spec: StatisticSpec,
    n_perms: int,
    seed: int,
    chunk: int = 100_000,
) -> EstimateReport:
    """Plain permutation estimate: the exceedance fraction of uniform draws."""
    if n_perms < 1:
        raise ContractViolation("n_perms must be >= 1")
    start = time.perf_counter()
    gamma = observed_statistic(spec, data)
    hits = 0
    for c, lo in enumerate(range(0, n_perms, chunk)):
        size = min(chunk, n_perms - lo)
        rng = derive_rng(seed, PHASE_CRUDE, 0, c)
        if data.is_two_group:
            z = uniform_partitions(rng, data.n, data.k, size)
        else:
            z = (rng.random((size, data.n)) < 0.5).astype(np.int8)
        hits += int(np.count_nonzero(statistic_eval(spec, data, z) >= gamma))
    p_hat = hits / n_perms
    return EstimateReport(
        p_hat=p_hat,
        se=math.sqrt(p_hat * (1.0 - p_hat) / n_perms),
        iterations=0,
        samples_adaptive=0,
        samples_estimate=n_perms,
        gamma_trace=(),
        method="crude",
        gamma=gamma,
        seed=seed,
        elapsed=time.perf_counter() - start,
    )
