"""Independent-Bernoulli sign model for one-group permutation tests."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractViolation, NoEliteSamples

EPS = 1e-6


@dataclass(frozen=True)
class BernoulliModel:
    """Probabilities ``p_i`` of assigning the ``+`` sign to each value.

    Probabilities are clipped into ``[EPS, 1 - EPS]`` on construction.
    """

    p: np.ndarray

    def __post_init__(self):
        p = np.array(self.p, dtype=np.float64).ravel()
        if p.size < 1 or not np.all(np.isfinite(p)):
            raise ContractViolation("sign probabilities must be finite and non-empty")
        p = np.clip(p, EPS, 1.0 - EPS)
        p.flags.writeable = False
        object.__setattr__(self, "p", p)

    @classmethod
    def uniform(cls, n: int) -> "BernoulliModel":
        """The crude permutation model, every sign a fair coin."""
        return cls(np.full(n, 0.5))

    @property
    def n(self) -> int:
        return self.p.size


def sample_signs(model: BernoulliModel, rng: np.random.Generator, size: Optional[int] = None):
    """Draw sign vector(s); a batch of ``size`` rows when ``size`` is given."""
    shape = (model.n,) if size is None else (size, model.n)
    return (rng.random(shape) < model.p).astype(np.int8)


def log_density_signs(s, model: BernoulliModel):
    s = np.asarray(s)
    if s.shape[-1] != model.n:
        raise ContractViolation(f"sign vector length {s.shape[-1]} != {model.n}")
    on = s.astype(np.float64)
    out = (on * np.log(model.p) + (1.0 - on) * np.log1p(-model.p)).sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def log_likelihood_ratio_signs(s, base: BernoulliModel, proposal: BernoulliModel):
    """``ln f(s; base) - ln f(s; proposal)``."""
    return log_density_signs(s, base) - log_density_signs(s, proposal)


def ce_update_signs(signs, elite, log_lr) -> BernoulliModel:
    """Closed-form cross-entropy update: the LR-weighted elite mean of each sign.

    Weights are exponentiated only after subtracting the largest elite
    log-ratio, which leaves the weighted average unchanged.
    """
    signs = np.atleast_2d(np.asarray(signs))
    elite = np.asarray(elite, dtype=bool).ravel()
    log_lr = np.asarray(log_lr, dtype=np.float64).ravel()
    if not (signs.shape[0] == elite.size == log_lr.size):
        raise ContractViolation("signs, elite and log_lr must have matching lengths")
    if not elite.any():
        raise NoEliteSamples("no sample reached the current threshold")
    lw = log_lr[elite]
    weights = np.exp(lw - lw.max())
    p = weights @ signs[elite].astype(np.float64) / weights.sum()
    return BernoulliModel(p)


def smooth(new: BernoulliModel, old: BernoulliModel, alpha: float) -> BernoulliModel:
    """``alpha * new + (1 - alpha) * old``; ``alpha = 1`` returns ``new``."""
    if not 0.0 < alpha <= 1.0:
        raise ContractViolation(f"alpha must lie in (0, 1], got {alpha}")
    if alpha == 1.0:
        return new
    return BernoulliModel(alpha * new.p + (1.0 - alpha) * old.p)
