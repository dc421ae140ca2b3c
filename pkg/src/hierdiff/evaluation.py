"""Held-out metrics: DSE against the oracle, argmax accuracy, agreement rates."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .conditions import ConditionBundle
from .diffusion import forward_sample, true_concrete_score
from .schedule import NoiseSchedule
from .synthdata import SynthCorpus, SynthSpec, emotion_mode, lip_mode, oracle_posterior, oracle_score
from .training import score_entropy


@dataclass(frozen=True, eq=False)
class HeldOut:
    grids: np.ndarray
    grid_t: np.ndarray
    t: np.ndarray
    bundle: ConditionBundle

    def __len__(self):
        return len(self.grids)


def make_heldout(corpus: SynthCorpus, sched: NoiseSchedule, vocab: int, seed: int,
                 t_floor: float = 1e-3, sigma_bar: float | None = None) -> HeldOut:
    """Corrupt every sample once.  Times are uniform, or fixed at ``sigma_bar`` when given."""
    rng = np.random.default_rng([seed, 0xE7A1])
    n = len(corpus)
    if sigma_bar is None:
        t = rng.uniform(t_floor * sched.horizon, sched.horizon, size=n)
    else:
        t = np.full(n, float(sched.time_for_sigma_bar(sigma_bar)))
    grid_t = forward_sample(corpus.grids, sched, t, rng.integers(2 ** 63), vocab)
    return HeldOut(corpus.grids, grid_t, t, corpus.bundle())


def _chunks(n, size):
    for i in range(0, n, size):
        yield slice(i, min(n, i + size))


def model_dse(score_fn, held: HeldOut, sched: NoiseSchedule, vocab: int, chunk: int = 256) -> float:
    """Mean per-sample DSE of ``score_fn(grid_t, sigma_bar, bundle) -> scores``."""
    total = 0.0
    for sl in _chunks(len(held), chunk):
        g_t, g0, t = held.grid_t[sl], held.grids[sl], held.t[sl]
        scores = score_fn(g_t, sched.sigma_bar(t), held.bundle.take(np.arange(len(held))[sl]))
        tgt = true_concrete_score(g_t, g0, sched, t, vocab)
        total += score_entropy(scores, tgt.scores, tgt.masked, sched.sigma(t)) * len(g_t)
    return total / len(held)


def oracle_score_fn(spec: SynthSpec):
    def fn(grid_t, sigma_bar, bundle):
        return oracle_score(spec, grid_t, bundle, None, sigma_bar=sigma_bar)
    return fn


def network_score_fn(net):
    return net.score


def argmax_accuracy(score_fn, held: HeldOut, sched: NoiseSchedule, vocab: int, chunk: int = 256):
    """Per-level accuracy of single-step argmax unmasking; returns ``(overall, per_level)``."""
    hits = np.zeros(held.grids.shape[1])
    counts = np.zeros(held.grids.shape[1])
    for sl in _chunks(len(held), chunk):
        g_t, g0, t = held.grid_t[sl], held.grids[sl], held.t[sl]
        scores = score_fn(g_t, sched.sigma_bar(t), held.bundle.take(np.arange(len(held))[sl]))
        masked = g_t == vocab
        ok = (scores.argmax(axis=-1) == g0) & masked
        hits += ok.sum(axis=(0, 2))
        counts += masked.sum(axis=(0, 2))
    per = np.where(counts > 0, hits / np.maximum(counts, 1), np.nan)
    return float(hits.sum() / counts.sum()), per


def bayes_rate(spec: SynthSpec, held: HeldOut, chunk: int = 256) -> float:
    """Expected accuracy of the Bayes-optimal argmax on the masked positions of ``held``."""
    tot, cnt = 0.0, 0
    for sl in _chunks(len(held), chunk):
        g_t = held.grid_t[sl]
        post = oracle_posterior(spec, g_t, held.bundle.take(np.arange(len(held))[sl]))
        masked = g_t == spec.vocab
        tot += post.max(axis=-1)[masked].sum()
        cnt += masked.sum()
    return float(tot / cnt)


def lip_agreement(spec: SynthSpec, grids: np.ndarray, phonemes, speaker) -> float:
    """Fraction of low-level tokens equal to the noise-free lip/speaker mode."""
    low = np.asarray(grids)[:, :spec.split]
    return float((low == lip_mode(spec, phonemes, speaker)).mean())


def emotion_agreement(spec: SynthSpec, grids: np.ndarray, emotion) -> float:
    grids = np.asarray(grids)
    high = grids[:, spec.split:]
    return float((high == emotion_mode(spec, grids[:, 0], emotion)).mean())


def binomial_sigma(p: float, n: int) -> float:
    return math.sqrt(p * (1 - p) / n)
