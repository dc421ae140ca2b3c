"""Absorbing-state forward corruption, true concrete scores and the Euler reverse step.

The chain acts independently on every token.  A clean token jumps to MASK at
rate ``sigma(t)``; MASK is absorbing.  Nothing here ever materialises the joint
rate matrix over whole grids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .schedule import NoiseSchedule, score_prefactor
from .token_space import check_grid, mask_id


def absorbing_rate_matrix(vocab_size: int) -> np.ndarray:
    """Token-level rate matrix ``Q[to, from]`` of shape ``(V+1, V+1)``.

    Off-diagonal mass flows only from clean tokens into MASK; columns sum to zero.
    """
    V = vocab_size
    Q = np.zeros((V + 1, V + 1))
    Q[V, :V] = 1.0
    Q[np.arange(V), np.arange(V)] = -1.0
    return Q


def _time_like(t, grid: np.ndarray) -> np.ndarray:
    """Broadcast scalar or per-batch times against a grid of shape (..., R, L)."""
    t = np.asarray(t, dtype=np.float64)
    return t.reshape(t.shape + (1,) * (grid.ndim - t.ndim))


def forward_sample(grid0, sched: NoiseSchedule, t, rng_seed, vocab_size: int) -> np.ndarray:
    """Mask each entry independently with probability ``1 - exp(-sigma_bar(t))``.

    ``t`` is a scalar or has one entry per leading batch element.
    """
    grid0 = check_grid(np.asarray(grid0), vocab_size)
    if np.any(grid0 == mask_id(vocab_size)):
        raise ValueError("forward_sample expects a clean (MASK-free) grid")
    rng = np.random.default_rng(rng_seed)
    p = _time_like(sched.mask_probability(t), grid0)
    hit = rng.random(grid0.shape) < p
    return np.where(hit, mask_id(vocab_size), grid0)


@dataclass(frozen=True)
class ConcreteScoreTarget:
    """Dense per-candidate targets; rows at unmasked positions are zero and ignored."""

    scores: np.ndarray  # (..., R, L, V)
    masked: np.ndarray  # (..., R, L) bool

    @property
    def num_targets(self) -> int:
        return int(self.masked.sum())


def true_concrete_score(grid_t, grid0, sched: NoiseSchedule, t, vocab_size: int,
                        sigma_bar=None) -> ConcreteScoreTarget:
    """Score ``p(x_hat | x0) / p(x_t | x0)`` for every masked position.

    Equals ``exp(-sb)/(1-exp(-sb))`` on the clean token and zero elsewhere.
    ``sigma_bar`` overrides the schedule lookup when given.
    """
    grid_t = check_grid(np.asarray(grid_t), vocab_size)
    grid0 = check_grid(np.asarray(grid0), vocab_size, allow_mask=False)
    if grid_t.shape != grid0.shape:
        raise ValueError(f"shape mismatch {grid_t.shape} vs {grid0.shape}")
    masked = grid_t == mask_id(vocab_size)
    if np.any(grid_t[~masked] != grid0[~masked]):
        raise ValueError("grid_t is not a corruption of grid0: unmasked entries differ")
    if sigma_bar is None:
        sigma_bar = sched.sigma_bar(t)
    pref = _time_like(score_prefactor(sigma_bar), grid0)
    onehot = np.eye(vocab_size)[grid0]
    scores = onehot * (pref * masked)[..., None]
    return ConcreteScoreTarget(scores=scores, masked=masked)


def euler_probabilities(scores: np.ndarray, rate_dt) -> np.ndarray:
    """Unmasking probabilities ``rate*dt*score`` rescaled so each row sums to at most one."""
    probs = np.asarray(rate_dt, dtype=np.float64) * scores
    total = probs.sum(axis=-1, keepdims=True)
    return np.where(total > 1.0, probs / np.where(total > 0, total, 1.0), probs)


def _categorical(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Index of the first cumulative bin above ``u``; ``probs.shape[-1]`` means "stay"."""
    cdf = np.cumsum(probs, axis=-1)
    return (u[..., None] >= cdf).sum(axis=-1)


def reverse_step(grid_t, scores, sched: NoiseSchedule, t: float, dt: float, rng_seed,
                 vocab_size: int, final: bool | None = None) -> np.ndarray:
    """One Euler step of the reverse chain from ``t`` to ``t - dt``.

    ``scores`` has shape ``grid_t.shape + (V,)``.  Unmasked entries are never
    touched.  On the final step (``t - dt == 0``, or ``final=True``) every
    still-masked entry is drawn from its normalised score vector.
    """
    grid_t = check_grid(np.asarray(grid_t), vocab_size)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != grid_t.shape + (vocab_size,):
        raise ValueError(f"scores shape {scores.shape} != {grid_t.shape + (vocab_size,)}")
    if dt <= 0:
        raise ValueError("dt must be positive")
    if t - dt < -1e-12 * max(1.0, t):
        raise ValueError(f"dt={dt} larger than t={t}")
    masked = grid_t == mask_id(vocab_size)
    sm = scores[masked]
    if np.any(~np.isfinite(sm)) or np.any(sm < 0):
        raise ValueError("scores must be non-negative and finite at masked positions")
    if final is None:
        final = t - dt <= 1e-12 * max(1.0, t)

    rng = np.random.default_rng(rng_seed)
    u = rng.random(grid_t.shape)[masked]
    if final:
        total = sm.sum(axis=-1, keepdims=True)
        probs = np.where(total > 0, sm / np.where(total > 0, total, 1.0), 1.0 / vocab_size)
        # guard the last bin against cumulative round-off
        new = np.minimum(_categorical(probs, u), vocab_size - 1)
    else:
        probs = euler_probabilities(sm, sched.sigma(t) * dt)
        new = _categorical(probs, u)  # == V keeps MASK
    out = grid_t.copy()
    out[masked] = new
    return out
