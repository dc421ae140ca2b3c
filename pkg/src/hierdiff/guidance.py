"""Euler reverse sampling with multi-condition guidance in log-score space.

For a bundle with conditions ``c`` present, the guided log-score is::

    (1 - w_all - sum_c w_c) * log s(NULL) + w_all * log s(all) + sum_c w_c * log s(only c)

Conditions that are NULL for a sample drop their term and weight.  Samples with
every condition NULL receive the unconditional score unchanged.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .conditions import CONDITIONS, ConditionBundle
from .diffusion import reverse_step
from .schedule import NoiseSchedule
from .synthdata import SynthSpec, oracle_score


@dataclass(frozen=True)
class GuidanceConfig:
    w_all: float = 2.5
    w_id: float = 1.25
    w_emo: float = 1.5
    w_lip: float = 2.0
    steps: int = 64

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        for name in ("w_all", "w_id", "w_emo", "w_lip"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    def weight(self, name: str) -> float:
        return getattr(self, "w_" + name)

    def to_dict(self) -> dict:
        return asdict(self)


class OracleNetwork:
    """Stand-in network whose scores come from the exact synthetic posterior."""

    def __init__(self, spec: SynthSpec, chunk: int = 1024):
        self.spec = spec
        self.chunk = chunk  # rows per oracle call, keeps each call under the work limit

    def log_score(self, grid_t, sigma_bar, bundle=None) -> np.ndarray:
        grid_t = np.asarray(grid_t)
        B = len(grid_t)
        sb = np.broadcast_to(np.asarray(sigma_bar, dtype=np.float64), (B,))
        if bundle is not None and bundle.all_null().all():
            bundle = None
        # posteriors depend only on (grid, sigma_bar, conditions): evaluate each distinct row once
        parts = [grid_t.reshape(B, -1).astype(np.float64), sb[:, None]]
        if bundle is not None:
            for c in CONDITIONS:
                keep = bundle.keep(c)
                parts.append(keep[:, None].astype(np.float64))
                if getattr(bundle, c) is not None:
                    vals = np.asarray(getattr(bundle, c), dtype=np.float64).reshape(B, -1)
                    parts.append(np.where(keep[:, None], vals, 0.0))
        _, first, inv = np.unique(np.concatenate(parts, axis=1), axis=0, return_index=True, return_inverse=True)
        s = np.empty((len(first),) + grid_t.shape[1:] + (self.spec.vocab,))
        for lo in range(0, len(first), self.chunk):
            rows = first[lo:lo + self.chunk]
            sub = None if bundle is None else bundle.take(rows)
            s[lo:lo + self.chunk] = oracle_score(self.spec, grid_t[rows], sub, None, sigma_bar=sb[rows])
        s = s[inv.ravel()]
        with np.errstate(divide="ignore"):
            return np.log(s)

    def score(self, grid_t, sigma_bar, bundle=None) -> np.ndarray:
        return np.exp(self.log_score(grid_t, sigma_bar, bundle))


def _term_weights(bundle: ConditionBundle | None, g: GuidanceConfig, B: int) -> dict:
    """Per-sample coefficients of each log-score term."""
    if bundle is None:
        return {"null": np.ones(B)}
    keep = {c: bundle.keep(c) for c in CONDITIONS}
    any_cond = np.zeros(B, bool)
    for c in CONDITIONS:
        any_cond |= keep[c]
    w = {"all": np.where(any_cond, g.w_all, 0.0)}
    for c in CONDITIONS:
        w[c] = np.where(keep[c], g.weight(c), 0.0)
    w["null"] = np.where(any_cond, 1.0 - w["all"] - sum(w[c] for c in CONDITIONS), 1.0)
    return w


def _term_bundle(name: str, bundle: ConditionBundle | None, B: int) -> ConditionBundle | None:
    if name == "all":
        return bundle
    if name == "null":
        return ConditionBundle(batch=B)
    return bundle.only(name)


def guided_log_score(network, grid_t, sigma_bar, bundle: ConditionBundle | None,
                     g: GuidanceConfig) -> np.ndarray:
    grid_t = np.asarray(grid_t)
    B = len(grid_t)
    weights = _term_weights(bundle, g, B)
    needed = [name for name, w in weights.items() if np.any(w != 0)]
    if len(needed) == 1 and np.all(weights[needed[0]] == 1.0):
        return network.log_score(grid_t, sigma_bar, _term_bundle(needed[0], bundle, B))
    sb = np.broadcast_to(np.asarray(sigma_bar, dtype=np.float64), (B,))
    bundles = [_term_bundle(n, bundle, B) for n in needed]
    stacked = network.log_score(np.concatenate([grid_t] * len(needed)), np.concatenate([sb] * len(needed)),
                                ConditionBundle.concat(bundles))
    out = 0.0
    for i, name in enumerate(needed):
        ls = stacked[i * B:(i + 1) * B]
        w = weights[name].reshape((B,) + (1,) * (ls.ndim - 1))
        with np.errstate(invalid="ignore"):
            out = out + np.where(w != 0, w * ls, 0.0)
    # all-NULL samples take the unconditional score verbatim
    if "null" in needed and bundle is not None:
        allnull = bundle.all_null()
        if allnull.any():
            out = np.where(allnull.reshape((B,) + (1,) * (out.ndim - 1)), stacked[needed.index("null") * B:(needed.index("null") + 1) * B], out)
    return out


def guided_score(network, grid_t, sigma_bar, bundle: ConditionBundle | None,
                 g: GuidanceConfig) -> np.ndarray:
    return np.exp(guided_log_score(network, grid_t, sigma_bar, bundle, g))


def sample(network, bundle: ConditionBundle | None, g: GuidanceConfig, sched: NoiseSchedule,
           shape: tuple, seed, vocab_size: int, return_trajectory: bool = False):
    """Run ``g.steps`` uniform Euler steps from an all-MASK grid of ``shape`` ``(B, R, L)``.

    ``seed`` is an int or a sequence of ints; step ``i`` draws from ``[*seed, i]``.
    """
    if len(shape) != 3:
        raise ValueError("shape must be (batch, levels, frames)")
    if bundle is not None and bundle.batch_size != shape[0]:
        raise ValueError("bundle batch size does not match shape")
    grid = np.full(shape, vocab_size, dtype=np.int64)
    times = np.linspace(sched.horizon, 0.0, g.steps + 1)
    traj = [grid]
    for i in range(g.steps):
        t, t_next = times[i], times[i + 1]
        final = i == g.steps - 1
        masked_rows = (grid == vocab_size).reshape(shape[0], -1).any(axis=1)
        if masked_rows.any():
            scores = np.zeros(shape + (vocab_size,))
            sub = None if bundle is None else bundle.take(np.nonzero(masked_rows)[0])
            if masked_rows.all():
                sub = bundle
                scores = guided_score(network, grid, sched.sigma_bar(t), sub, g)
            else:
                scores[masked_rows] = guided_score(network, grid[masked_rows], sched.sigma_bar(t), sub, g)
            grid = reverse_step(grid, scores, sched, t, t - t_next, [*np.ravel(seed).tolist(), i], vocab_size,
                               final=final)
        if return_trajectory:
            traj.append(grid)
    return (grid, traj) if return_trajectory else grid
