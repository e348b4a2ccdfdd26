"""Adaptive cross-entropy driver and the importance-sampling estimate.

One-group data use the independent Bernoulli sign model (AISP1); two-group
data use the conditional Bernoulli partition model (AISP2). Both start from
the crude permutation law and tilt it toward the region ``T >= gamma``
through a sequence of intermediate thresholds.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

from . import condbern, onegroup
from .condbern import CBModel
from .core import ObservedData, StatisticSpec, observed_statistic, statistic_eval
from .errors import ContractViolation, ThresholdNotReached
from .onegroup import BernoulliModel

# Phase tags mixed into stream seeds.
PHASE_ADAPT = 0
PHASE_ESTIMATE = 1
PHASE_CRUDE = 2
PHASE_REPLICATE = 3

# Draws are generated in fixed-size chunks, one derived stream per chunk, so the
# output does not depend on how many workers share the chunks.
CHUNK_SIZE = 1000

Model = Union[BernoulliModel, CBModel]


def derive_rng(seed: int, phase: int, iteration: int = 0, worker: int = 0) -> np.random.Generator:
    """Independent generator for ``(seed, phase, iteration, worker)``."""
    ss = np.random.SeedSequence(int(seed) % 2**64, spawn_key=(phase, iteration, worker))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, phase: int, index: int) -> int:
    """A 64-bit child seed, e.g. for replicate ``index`` of a master seed."""
    ss = np.random.SeedSequence(int(seed) % 2**64, spawn_key=(phase, index))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class CEConfig:
    rho: float = 0.1
    n_update: int = 2000
    m_estimate: int = 10_000
    max_iters: int = 20
    alpha: float = 1.0
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ContractViolation(f"rho must lie in (0, 1), got {self.rho}")
        if self.n_update < 100:
            raise ContractViolation(f"n_update must be >= 100, got {self.n_update}")
        if self.m_estimate < 1:
            raise ContractViolation("m_estimate must be >= 1")
        if self.max_iters < 1:
            raise ContractViolation("max_iters must be >= 1")
        if not 0.0 < self.alpha <= 1.0:
            raise ContractViolation(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.workers < 1:
            raise ContractViolation("workers must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("workers")
        return d


@dataclass
class CEState:
    """Mutable iteration state of one adaptive run."""

    params: Model
    iter: int = 0
    gamma_k: float = -math.inf
    gamma_trace: list = field(default_factory=list)
    reached: bool = False


@dataclass(frozen=True)
class EstimateReport:
    p_hat: float
    se: float
    iterations: int
    samples_adaptive: int
    samples_estimate: int
    gamma_trace: tuple
    method: str
    gamma: float
    seed: Optional[int] = None
    reached: bool = True
    elapsed: float = 0.0
    proposal: Optional[Model] = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class ReplicationSummary:
    runs: int
    mse: float
    are: float
    mcre: float
    mean_p_hat: float
    sd_p_hat: float
    reference_p: float


# -- model families ------------------------------------------------------------


class _SignFamily:
    method = "aisp1"

    def __init__(self, data: ObservedData):
        self.base = BernoulliModel.uniform(data.n)

    def sample(self, model, rng, size):
        return onegroup.sample_signs(model, rng, size)

    def log_lr(self, s, proposal):
        return onegroup.log_likelihood_ratio_signs(s, self.base, proposal)

    def update(self, s, elite, log_lr, previous, alpha):
        new = onegroup.ce_update_signs(s, elite, log_lr)
        return onegroup.smooth(new, previous, alpha)


class _PartitionFamily:
    method = "aisp2"

    def __init__(self, data: ObservedData):
        self.base = CBModel.uniform(data.n, data.k)
        self.k = data.k
        # ln f(d; w_0) = -ln C(n, k) for every partition
        self.log_base = -(math.lgamma(data.n + 1) - math.lgamma(data.k + 1) - math.lgamma(data.m + 1))

    def sample(self, model, rng, size):
        return condbern.draft_samples(model, rng, size)

    def log_lr(self, d, proposal):
        table = condbern.norm_constants(proposal)
        return self.log_base - condbern.log_density_cb(d, proposal, table)

    def update(self, d, elite, log_lr, previous, alpha):
        new = condbern.ce_update_cb(d, elite, log_lr, self.k)
        return condbern.smooth(new, previous, alpha)


def _family(data: ObservedData):
    return _PartitionFamily(data) if data.is_two_group else _SignFamily(data)


def _family_for_model(model: Model, data: ObservedData):
    fam = _family(data)
    expected = CBModel if data.is_two_group else BernoulliModel
    if not isinstance(model, expected):
        raise ContractViolation(f"{type(model).__name__} does not match the data design")
    return fam


def _draw(fam, model, size: int, seed: int, phase: int, iteration: int, workers: int = 1):
    """Draw ``size`` assignments as concatenated per-chunk streams."""
    sizes = [CHUNK_SIZE] * (size // CHUNK_SIZE)
    if size % CHUNK_SIZE:
        sizes.append(size % CHUNK_SIZE)

    def one(c):
        return fam.sample(model, derive_rng(seed, phase, iteration, c), sizes[c])

    if workers > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(one, range(len(sizes))))
    else:
        parts = [one(c) for c in range(len(sizes))]
    return np.concatenate(parts, axis=0)


# -- operations ----------------------------------------------------------------


def sample_quantile(values, q: float) -> float:
    """The ``ceil(q * N)``-th smallest value (1-indexed), no interpolation."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ContractViolation("quantile of an empty sample")
    if not 0.0 < q < 1.0:
        raise ContractViolation(f"q must lie in (0, 1), got {q}")
    # round away float noise such as 0.9 * 2000 = 1800.0000000000002
    rank = max(1, math.ceil(round(q * v.size, 9)))
    return float(np.partition(v, rank - 1)[rank - 1])


def estimate_step(
    base: Model,
    proposal: Model,
    data: ObservedData,
    spec: StatisticSpec,
    gamma: float,
    m: int,
    seed: int,
    workers: int = 1,
) -> tuple[float, float]:
    """Importance-sampling estimate of ``Pr_base(T >= gamma)`` from ``m`` draws.

    Returns ``(p_hat, se)`` where ``se`` is the sample standard deviation of
    the weighted indicators over ``sqrt(m)``.
    """
    fam = _family_for_model(proposal, data)
    z = _draw(fam, proposal, m, seed, PHASE_ESTIMATE, 0, workers)
    hit = statistic_eval(spec, data, z) >= gamma
    if data.is_two_group:
        log_base = condbern.log_density_cb(z, base, condbern.norm_constants(base))
        log_prop = condbern.log_density_cb(z, proposal, condbern.norm_constants(proposal))
    else:
        log_base = onegroup.log_density_signs(z, base)
        log_prop = onegroup.log_density_signs(z, proposal)
    terms = np.where(hit, np.exp(log_base - log_prop), 0.0)
    p_hat = float(terms.mean())
    se = float(terms.std(ddof=1) / math.sqrt(m)) if m > 1 else 0.0
    return p_hat, se


def adaptive_ce_run(data: ObservedData, spec: StatisticSpec, config: CEConfig) -> EstimateReport:
    """Estimate the upper-tail permutation p-value of the observed statistic.

    Each iteration draws ``n_update`` assignments from the current proposal,
    sets the threshold to ``min(gamma, (1 - rho)-quantile)``, and refits the
    proposal on the samples reaching it, weighted by their likelihood ratio
    against the crude law. Once the unclipped quantile reaches ``gamma`` the
    last refit (at ``gamma`` itself) becomes the importance density for the
    final ``m_estimate`` draws.

    Raises:
        ThresholdNotReached: ``max_iters`` adaptive iterations ran without the
            quantile reaching ``gamma``. The exception carries the trace and a
            report estimated from the last proposal.
    """
    start = time.perf_counter()
    spec.check_design(data)
    gamma = observed_statistic(spec, data)
    fam = _family(data)
    state = CEState(params=fam.base)

    while state.iter < config.max_iters:
        z = _draw(fam, state.params, config.n_update, config.seed, PHASE_ADAPT, state.iter, config.workers)
        stats = statistic_eval(spec, data, z)
        quantile = sample_quantile(stats, 1.0 - config.rho)
        state.gamma_k = min(gamma, quantile)
        state.gamma_trace.append(state.gamma_k)
        elite = stats >= state.gamma_k
        log_lr = fam.log_lr(z, state.params)
        state.params = fam.update(z, elite, log_lr, state.params, config.alpha)
        state.iter += 1
        if quantile >= gamma:
            state.reached = True
            break

    p_hat, se = estimate_step(
        fam.base, state.params, data, spec, gamma, config.m_estimate, config.seed, config.workers
    )
    report = EstimateReport(
        p_hat=p_hat,
        se=se,
        iterations=state.iter,
        samples_adaptive=state.iter * config.n_update,
        samples_estimate=config.m_estimate,
        gamma_trace=tuple(state.gamma_trace),
        method=fam.method,
        gamma=gamma,
        seed=config.seed,
        reached=state.reached,
        elapsed=time.perf_counter() - start,
        proposal=state.params,
    )
    if not state.reached:
        raise ThresholdNotReached(
            f"threshold {gamma:.6g} not reached after {config.max_iters} iterations "
            f"(last {state.gamma_k:.6g})",
            state.gamma_trace,
            report,
        )
    return report


def replicate_metrics(p_hats, reference_p: float) -> ReplicationSummary:
    """Cross-run error metrics against a reference p-value.

    MSE is the mean squared error of the runs, ARE the absolute relative
    error of their mean, and MCRE the standard error of the mean (sample SD
    over ``sqrt(runs)``) relative to the reference.
    """
    p = np.asarray(p_hats, dtype=np.float64).ravel()
    if not reference_p > 0:
        raise ContractViolation(f"reference p must be positive, got {reference_p}")
    if p.size < 2:
        raise ContractViolation("replication metrics need at least two runs")
    mean = float(p.mean())
    sd = float(p.std(ddof=1))
    return ReplicationSummary(
        runs=int(p.size),
        mse=float(np.mean((p - reference_p) ** 2)),
        are=abs(mean - reference_p) / reference_p,
        mcre=sd / math.sqrt(p.size) / reference_p,
        mean_p_hat=mean,
        sd_p_hat=sd,
        reference_p=float(reference_p),
    )
