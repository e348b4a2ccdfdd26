"""Conditional Bernoulli (CB) distribution over k-of-n partitions.

The CB law with odds ``w`` puts mass ``prod(w_i ** d_i) / R_k`` on every 0/1
vector ``d`` with exactly ``k`` ones, where ``R_k = e_k(w)`` is the
elementary symmetric polynomial of degree ``k``. Leave-one-out constants
``R_{r,-j} = e_r(w without w_j)`` give the inclusion probabilities
``pi_j = w_j R_{k-1,-j} / R_k``.

Two routes compute ``R``: the two-term recursion
``e_r(w_1..w_i) = e_r(w_1..w_{i-1}) + w_i e_{r-1}(w_1..w_{i-1})`` (default,
optionally in log-sum-exp form) and the alternating power-sum recursion of
Newton's identities, kept as a cross-check because it cancels badly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .errors import ContractViolation, NoEliteSamples, NonConvergence

W_MIN = 1e-8
W_MAX = 1e8
TARGET_EPS = 1e-6
IPF_TOL = 1e-6
IPF_MAX_SWEEPS = 1000

# Outside this odds range, or above LOG_DOMAIN_N items, R is built in log space.
DIRECT_W_RANGE = (1e-3, 1e3)
LOG_DOMAIN_N = 50

# Products of this many odds <= W_MAX / W_MIN stay far inside float range.
_RESCALE_EVERY = 4


@dataclass(frozen=True)
class CBModel:
    """Odds ``w`` (clamped to ``[W_MIN, W_MAX]``) and Group-1 size ``k``."""

    w: np.ndarray
    k: int

    def __post_init__(self):
        w = np.array(self.w, dtype=np.float64).ravel()
        if w.size < 1 or not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ContractViolation("CB odds must be finite and positive")
        w = np.clip(w, W_MIN, W_MAX)
        w.flags.writeable = False
        object.__setattr__(self, "w", w)
        k = int(self.k)
        if not 0 <= k <= w.size:
            raise ContractViolation(f"k={k} outside [0, n={w.size}]")
        object.__setattr__(self, "k", k)

    @classmethod
    def uniform(cls, n: int, k: int) -> "CBModel":
        """Unit odds: every k-subset equally likely (crude permutation)."""
        return cls(np.ones(n), k)

    @property
    def n(self) -> int:
        return self.w.size


@dataclass(frozen=True)
class NormTable:
    """Normalization constants of a CB model, stored as logarithms.

    ``log_R[r] = ln e_r(w)`` for ``r = 0..k`` and
    ``log_R_loo[j, r] = ln e_r(w without w_j)`` for ``r = 0..k-1``.
    ``T_pows`` holds the power sums when the alternating recursion was used.
    """

    log_R: np.ndarray
    log_R_loo: np.ndarray
    method: str
    log_domain: bool
    T_pows: Optional[np.ndarray] = None

    @property
    def R(self) -> np.ndarray:
        return np.exp(self.log_R)

    @property
    def R_loo(self) -> np.ndarray:
        return np.exp(self.log_R_loo)

    @property
    def log_Rk(self) -> float:
        return float(self.log_R[-1])


@dataclass(frozen=True)
class CoverageProbs:
    pi: np.ndarray
    a: np.ndarray


@dataclass(frozen=True)
class SufficientStats:
    """Weighted inclusion counts ``y_i = sum_l S_l d_li`` of an elite batch."""

    y: np.ndarray
    S_sum: float
    weights: np.ndarray

    @classmethod
    def from_partitions(cls, partitions, weights) -> "SufficientStats":
        d = np.atleast_2d(np.asarray(partitions, dtype=np.float64))
        s = np.asarray(weights, dtype=np.float64).ravel()
        if d.shape[0] != s.size:
            raise ContractViolation("one weight per partition vector is required")
        if np.any(s < 0) or not np.all(np.isfinite(s)):
            raise ContractViolation("weights must be finite and nonnegative")
        return cls(y=s @ d, S_sum=float(s.sum()), weights=s)


def use_log_domain(w: np.ndarray) -> bool:
    lo, hi = DIRECT_W_RANGE
    return w.size > LOG_DOMAIN_N or bool(np.any(w < lo) or np.any(w > hi))


# -- normalization constants -------------------------------------------------


def _stable_direct(w: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    n = w.size
    pre = np.zeros((n + 1, k + 1))
    pre[0, 0] = 1.0
    for i in range(n):
        pre[i + 1] = pre[i]
        pre[i + 1, 1:] += w[i] * pre[i, :-1]
    suf = np.zeros((n + 1, k + 1))
    suf[n, 0] = 1.0
    for i in range(n - 1, -1, -1):
        suf[i] = suf[i + 1]
        suf[i, 1:] += w[i] * suf[i + 1, :-1]
    loo = np.empty((n, k))
    for r in range(k):
        # e_r(w \ w_j) = sum_t e_t(w_1..w_{j-1}) e_{r-t}(w_{j+1}..w_n)
        loo[:, r] = np.einsum("jt,jt->j", pre[:n, : r + 1], suf[1:, r::-1])
    with np.errstate(divide="ignore"):
        return np.log(pre[n]), np.log(loo)


def _stable_log(w: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    n = w.size
    lw = np.log(w)
    pre = np.full((n + 1, k + 1), -np.inf)
    pre[0, 0] = 0.0
    for i in range(n):
        pre[i + 1] = pre[i]
        pre[i + 1, 1:] = np.logaddexp(pre[i, 1:], lw[i] + pre[i, :-1])
    suf = np.full((n + 1, k + 1), -np.inf)
    suf[n, 0] = 0.0
    for i in range(n - 1, -1, -1):
        suf[i] = suf[i + 1]
        suf[i, 1:] = np.logaddexp(suf[i + 1, 1:], lw[i] + suf[i + 1, :-1])
    loo = np.empty((n, k))
    for r in range(k):
        loo[:, r] = logsumexp(pre[:n, : r + 1] + suf[1:, r::-1], axis=1)
    return pre[n], loo


def _alternating(w: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = w.size
    powers = w[None, :] ** np.arange(1, k + 1)[:, None]  # (k, n)
    T = powers.sum(axis=1)
    R = np.zeros(k + 1)
    R[0] = 1.0
    for r in range(1, k + 1):
        i = np.arange(1, r + 1)
        R[r] = np.sum((-1.0) ** (i + 1) * T[i - 1] * R[r - i]) / r
    T_loo = T[:, None] - powers  # T_{i,j}
    loo = np.zeros((n, k))
    if k >= 1:
        loo[:, 0] = 1.0
    for r in range(1, k):
        i = np.arange(1, r + 1)
        sign = (-1.0) ** (i + 1)
        loo[:, r] = (sign[:, None] * T_loo[i - 1] * loo[:, r - i].T).sum(axis=0) / r
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(R), np.log(loo), T


def norm_constants(
    model: CBModel, method: str = "stable", log_domain: Optional[bool] = None
) -> NormTable:
    """Compute ``R_0..R_k`` and every leave-one-out constant ``R_{r,-j}``.

    Args:
        model: CB parameters.
        method: ``"stable"`` for the two-term recursion or ``"alternating"``
            for the power-sum recursion (direct arithmetic only).
        log_domain: force or forbid log-sum-exp arithmetic for the stable
            route. ``None`` picks log space when ``n > 50`` or any odds fall
            outside ``[1e-3, 1e3]``.
    """
    w, k = model.w, model.k
    if method == "stable":
        if log_domain is None:
            log_domain = use_log_domain(w)
        if log_domain:
            log_R, log_loo = _stable_log(w, k)
        else:
            log_R, log_loo = _stable_direct(w, k)
            if not np.all(np.isfinite(log_R)):
                log_R, log_loo = _stable_log(w, k)
                log_domain = True
        return NormTable(log_R, log_loo, "stable", bool(log_domain))
    if method == "alternating":
        log_R, log_loo, T = _alternating(w, k)
        return NormTable(log_R, log_loo, "alternating", False, T_pows=T)
    raise ContractViolation(f"unknown recursion {method!r}")


def coverage_probs(model: CBModel, table: Optional[NormTable] = None) -> CoverageProbs:
    """Inclusion probabilities ``pi_j`` and the drafting distribution ``pi / k``."""
    if model.k == 0:
        zeros = np.zeros(model.n)
        return CoverageProbs(zeros, zeros.copy())
    if table is None:
        table = norm_constants(model)
    pi = np.exp(np.log(model.w) + table.log_R_loo[:, model.k - 1] - table.log_Rk)
    return CoverageProbs(pi=pi, a=pi / model.k)


# -- batched leave-one-out constants -------------------------------------------


def _batch_log_loo(W: np.ndarray, r: int) -> np.ndarray:
    """``ln e_r(W[b] without W[b, j])`` for every row ``b`` and index ``j``.

    Zero entries of ``W`` act as removed items. Prefix and suffix polynomials
    are rescaled to a unit maximum every few items with the log-scale carried
    separately, so the result stays finite for odds spanning
    ``[W_MIN, W_MAX]`` (the caller keeps the geometric mean near 1).
    """
    N, n = W.shape
    if r == 0:
        return np.zeros((N, n))
    Wt = np.ascontiguousarray(W.T)
    # layout (item, degree, row): updates run over contiguous rows
    pre = np.zeros((n + 1, r + 1, N))
    pre[0, 0] = 1.0
    pre_scale = np.zeros((n + 1, N))
    for i in range(n):
        nxt = pre[i + 1]
        nxt[:] = pre[i]
        nxt[1:] += Wt[i] * pre[i, :-1]
        pre_scale[i + 1] = pre_scale[i]
        if i % _RESCALE_EVERY == 0 or i == n - 1:
            top = nxt.max(axis=0)
            nxt /= top
            pre_scale[i + 1] += np.log(top)
    suf = np.zeros((n + 1, r + 1, N))
    suf[n, 0] = 1.0
    suf_scale = np.zeros((n + 1, N))
    for i in range(n - 1, -1, -1):
        nxt = suf[i]
        nxt[:] = suf[i + 1]
        nxt[1:] += Wt[i] * suf[i + 1, :-1]
        suf_scale[i] = suf_scale[i + 1]
        if i % _RESCALE_EVERY == 0 or i == 0:
            top = nxt.max(axis=0)
            nxt /= top
            suf_scale[i] += np.log(top)
    comb = np.einsum("jtb,jtb->jb", pre[:n], suf[1:, ::-1])
    with np.errstate(divide="ignore"):
        out = np.log(comb) + pre_scale[:n] + suf_scale[1:]
    return out.T


def draft_samples(model: CBModel, rng: np.random.Generator, size: int) -> np.ndarray:
    """Draw ``size`` partition vectors by drafting sampling.

    The ``k`` Group-1 indices are chosen one at a time; each pick is drawn
    from the coverage distribution of a CB model restricted to the indices
    not yet chosen, with one fewer pick remaining.
    """
    n, k = model.n, model.k
    d = np.zeros((size, n), dtype=np.int8)
    if k == 0 or size == 0:
        return d
    if k == n:
        d[:] = 1
        return d
    lw = np.log(model.w)
    w = np.exp(lw - lw.mean())
    # per-row candidate odds and their original indices, compacted as picks leave
    W = np.tile(w, (size, 1))
    idx = np.tile(np.arange(n), (size, 1))
    rows = np.arange(size)
    for step in range(k):
        remaining = k - step
        log_a = np.log(W) + _batch_log_loo(W, remaining - 1)
        top = log_a.max(axis=1, keepdims=True)
        bad = ~np.isfinite(top[:, 0])
        if bad.any():
            # every candidate underflowed: fall back to the exact log-space table
            for b in np.flatnonzero(bad):
                log_a[b] = _log_drafting_weights(W[b], remaining)
            top = log_a.max(axis=1, keepdims=True)
        cum = np.cumsum(np.exp(log_a - top), axis=1)
        u = rng.random(size) * cum[:, -1]
        pick = np.minimum((cum <= u[:, None]).sum(axis=1), W.shape[1] - 1)
        d[rows, idx[rows, pick]] = 1
        keep = np.ones(W.shape, dtype=bool)
        keep[rows, pick] = False
        W = W[keep].reshape(size, -1)
        idx = idx[keep].reshape(size, -1)
    return d


def _log_drafting_weights(W_row: np.ndarray, remaining: int) -> np.ndarray:
    table = _stable_log(W_row, remaining)[1]
    return np.log(W_row) + table[:, remaining - 1]


def draft_sample(model: CBModel, rng: np.random.Generator) -> np.ndarray:
    """Draw a single partition vector (see :func:`draft_samples`)."""
    return draft_samples(model, rng, 1)[0]


def log_density_cb(d, model: CBModel, table: Optional[NormTable] = None):
    """``sum_{d_i = 1} ln w_i - ln R_k`` for one or many partition vectors."""
    d = np.asarray(d)
    if d.shape[-1] != model.n:
        raise ContractViolation(f"partition length {d.shape[-1]} != {model.n}")
    if np.any(d.sum(axis=-1) != model.k):
        raise ContractViolation(f"partition vectors must contain exactly k={model.k} ones")
    if table is None:
        table = norm_constants(model)
    out = (d.astype(np.float64) * np.log(model.w)).sum(axis=-1) - table.log_Rk
    return float(out) if np.ndim(out) == 0 else out


# -- cross-entropy update ------------------------------------------------------


def _floor_targets(t: np.ndarray, k: int, eps: float = TARGET_EPS) -> np.ndarray:
    """Clip inclusion targets into ``[eps, 1 - eps]`` keeping ``sum = k``.

    The mass removed or added by clipping is redistributed in proportion to
    each coordinate's room before hitting a bound.
    """
    t = np.clip(t, eps, 1.0 - eps)
    for _ in range(100):
        gap = k - t.sum()
        if abs(gap) <= 1e-14 * k:
            break
        room = (1.0 - eps - t) if gap > 0 else (t - eps)
        total = room.sum()
        if total <= 0:
            break
        t = t + np.sign(gap) * min(abs(gap) / total, 1.0) * room
    return t


class _IpfMap:
    """One proportional-fitting sweep on sorted targets, in log-odds.

    With the last (largest-target) coordinate held fixed, every other
    coordinate is set to ``w_i = w_n (t_i / t_n) R_{k-1,-n} / R_{k-1,-i}``,
    the ratio form of ``w_i R_{k-1,-i} / R_k = t_i``.
    """

    def __init__(self, ts: np.ndarray, k: int):
        self.ts = ts
        self.log_ts = np.log(ts)
        self.k = k
        self.sweeps = 0

    def __call__(self, lw: np.ndarray) -> tuple[float, np.ndarray]:
        self.sweeps += 1
        lw_c = lw - lw.max()
        lloo = _batch_log_loo(np.exp(lw_c)[None, :], self.k - 1)[0]
        lterms = lw_c + lloo  # ln(w_j R_{k-1,-j}); these sum to k R_k
        pi = np.exp(lterms - logsumexp(lterms) + np.log(self.k))
        residual = float(np.max(np.abs(pi - self.ts)))
        nxt = lw[-1] + self.log_ts - self.log_ts[-1] + lloo[-1] - lloo
        nxt[-1] = lw[-1]
        return residual, nxt


def _ipf_sorted(ts: np.ndarray, k: int, tol: float, max_sweeps: int) -> np.ndarray:
    step = _IpfMap(ts, k)
    lw = np.log(ts) - np.log1p(-ts)
    residual = np.inf
    while step.sweeps < max_sweeps:
        residual, lw1 = step(lw)
        if residual <= tol:
            return lw
        if step.sweeps >= max_sweeps:
            break
        residual, lw2 = step(lw1)
        if residual <= tol:
            return lw1
        # SQUAREM extrapolation along the last two sweeps
        r = lw1 - lw
        v = lw2 - 2.0 * lw1 + lw
        vv = float(v @ v)
        alpha = min(-1.0, -np.sqrt(float(r @ r) / vv)) if vv > 0 else -1.0
        jump = lw - 2.0 * alpha * r + alpha * alpha * v
        jump[-1] = lw[-1]
        if step.sweeps >= max_sweeps:
            lw = lw2
            break
        res_jump, lw3 = step(jump)
        if res_jump <= tol:
            return jump
        lw = lw3 if res_jump < residual else lw2
    raise NonConvergence(
        f"IPF residual {residual:.3e} > {tol:.1e} after {max_sweeps} sweeps",
        residual=float(residual),
        sweeps=step.sweeps,
    )


def ipf_fit(
    stats: SufficientStats,
    k: int,
    tol: float = IPF_TOL,
    max_sweeps: int = IPF_MAX_SWEEPS,
) -> CBModel:
    """Solve ``pi(w) = y / S_sum`` by iterative proportional fitting.

    Targets are floored into ``[TARGET_EPS, 1 - TARGET_EPS]``, sorted
    ascending, and the largest one's odds are pinned to fix the scale of
    ``w``. Sweeps start from the target odds and are accelerated with
    SQUAREM. When ``k > n / 2`` the fit runs on the complementary partition
    (targets ``1 - t``, size ``n - k``, odds ``1 / w``), where inclusion
    probabilities stay away from 1 and the sweeps converge quickly.

    Raises:
        NonConvergence: the maximum coverage residual is still above ``tol``
            after ``max_sweeps`` sweeps.
    """
    y = np.asarray(stats.y, dtype=np.float64)
    n = y.size
    if stats.S_sum <= 0:
        raise ContractViolation("sufficient statistics need a positive total weight")
    if not 1 <= k <= n:
        raise ContractViolation(f"k={k} outside [1, n={n}]")
    if k == n:
        return CBModel(np.ones(n), k)
    targets = _floor_targets(y / stats.S_sum, k)
    flip = 2 * k > n
    if flip:
        targets, k_fit = 1.0 - targets, n - k
    else:
        k_fit = k
    order = np.argsort(targets, kind="stable")
    lw_sorted = _ipf_sorted(targets[order], k_fit, tol, max_sweeps)
    lw = np.empty(n)
    lw[order] = lw_sorted
    if flip:
        lw = -lw
    # the law is scale free: centre the log-odds range before clamping
    lw -= 0.5 * (lw.max() + lw.min())
    return CBModel(np.exp(np.clip(lw, np.log(W_MIN), np.log(W_MAX))), k)


def ce_update_cb(partitions, elite, log_lr, k: int) -> CBModel:
    """Cross-entropy update of the CB odds from a weighted elite batch.

    Elite weights ``S_l = exp(log_lr_l)`` are shifted by their maximum before
    exponentiation; the fit only depends on ``y / S_sum``.
    """
    d = np.atleast_2d(np.asarray(partitions))
    elite = np.asarray(elite, dtype=bool).ravel()
    log_lr = np.asarray(log_lr, dtype=np.float64).ravel()
    if not (d.shape[0] == elite.size == log_lr.size):
        raise ContractViolation("partitions, elite and log_lr must have matching lengths")
    if not elite.any():
        raise NoEliteSamples("no sample reached the current threshold")
    lw = log_lr[elite]
    stats = SufficientStats.from_partitions(d[elite], np.exp(lw - lw.max()))
    return ipf_fit(stats, k)


def smooth(new: CBModel, old: CBModel, alpha: float) -> CBModel:
    """Blend the implied Bernoulli probabilities ``w / (1 + w)`` of two models."""
    if not 0.0 < alpha <= 1.0:
        raise ContractViolation(f"alpha must lie in (0, 1], got {alpha}")
    if alpha == 1.0:
        return new
    p = alpha * new.w / (1 + new.w) + (1 - alpha) * old.w / (1 + old.w)
    return CBModel(p / (1 - p), new.k)
