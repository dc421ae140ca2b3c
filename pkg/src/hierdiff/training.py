"""Score-entropy objective, identity alignment, condition dropout and the training loop."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .autograd import Tensor
from .conditions import CONDITIONS, ConditionBundle
from .diffusion import forward_sample, true_concrete_score
from .network import ScoreNetwork
from .schedule import NoiseSchedule, score_prefactor
from .synthdata import SynthCorpus

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("iter", "dse_loss", "id_loss", "total_loss", "mask_fraction_mean", "wall_ms")


@dataclass(frozen=True)
class TrainConfig:
    lambda_id: float = 100.0
    lr: float = 1e-4
    batch: int = 16
    iters: int = 2000
    dropout_per_condition: float = 0.10
    dropout_all: float = 0.10
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    t_floor: float = 1e-3  # fraction of the horizon
    t_sampling: str = "stratified"  # or "iid"
    seed: int = 0

    def __post_init__(self):
        for name in ("dropout_per_condition", "dropout_all"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.batch < 1 or self.iters < 0:
            raise ValueError("batch must be >= 1 and iters >= 0")
        if self.t_sampling not in ("stratified", "iid"):
            raise ValueError(f"unknown t_sampling {self.t_sampling!r}")

    def to_dict(self) -> dict:
        return asdict(self)


# --- losses -----------------------------------------------------------------


def _entropy_normaliser(c: np.ndarray) -> np.ndarray:
    """``N(c) = c log c - c`` with ``N(0) = 0``."""
    safe = np.where(c > 0, c, 1.0)
    return np.where(c > 0, c * np.log(safe) - c, 0.0)


def score_entropy(scores, targets, masked, weight) -> float:
    """``sum weight * sum_v [s_v - c_v log s_v + N(c_v)]`` over masked positions.

    ``scores`` and ``targets`` are ``(..., R, L, V)``; ``weight`` broadcasts
    against the leading batch axes.  Result is averaged over the batch axis when
    the inputs are batched.
    """
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    masked = np.asarray(masked, dtype=bool)
    if np.any(~(scores[masked] > 0)):
        raise ValueError("scores must be strictly positive at masked positions")
    s = np.where(masked[..., None], scores, 1.0)
    c = np.where(masked[..., None], targets, 0.0)
    per = s - np.where(c > 0, c * np.log(s), 0.0) + _entropy_normaliser(c)
    per = np.where(masked[..., None], per, 0.0).sum(axis=-1)
    w = np.asarray(weight, dtype=np.float64)
    w = w.reshape(w.shape + (1,) * (per.ndim - w.ndim))
    weighted = w * per
    if weighted.ndim == 3:
        return float(weighted.reshape(len(weighted), -1).sum(axis=1).mean())
    return float(weighted.sum())


def score_entropy_grad(scores, targets, masked, weight) -> np.ndarray:
    """Analytic ``d score_entropy / d scores`` (per-sample, before batch averaging)."""
    scores = np.asarray(scores, dtype=np.float64)
    c = np.asarray(targets, dtype=np.float64)
    masked = np.asarray(masked, dtype=bool)
    w = np.asarray(weight, dtype=np.float64)
    w = w.reshape(w.shape + (1,) * (scores.ndim - w.ndim))
    g = w * (1.0 - np.where(c > 0, c / np.where(masked[..., None], scores, 1.0), 0.0))
    return np.where(masked[..., None], g, 0.0)


def dse_loss(scores, grid_t, grid0, sched: NoiseSchedule, t, vocab_size: int) -> float:
    """Denoising score entropy summed over levels and masked positions, batch mean.

    Positions are weighted by the absorbing rate ``sigma(t)``.
    """
    target = true_concrete_score(grid_t, grid0, sched, t, vocab_size)
    weight = sched.sigma(t)
    return score_entropy(scores, target.scores, target.masked, weight)


def dse_loss_tensor(log_scores: Tensor, grid_t, grid0, sigma, sigma_bar, vocab_size: int) -> Tensor:
    """Differentiable DSE from log-scores ``(B, R, L, V)``; returns the batch mean."""
    grid_t = np.asarray(grid_t)
    grid0 = np.asarray(grid0)
    B = grid_t.shape[0]
    masked = grid_t == vocab_size
    pref = score_prefactor(sigma_bar)  # (B,)
    w = (np.asarray(sigma, dtype=np.float64) * np.ones(B)).reshape(B, 1, 1, 1) * masked[..., None]
    onehot = np.eye(vocab_size)[grid0]
    c = pref.reshape(B, 1, 1, 1) * onehot
    const = (w * _entropy_normaliser(c)).sum()
    s = log_scores.exp()
    loss = (s * w).sum() - (log_scores * (w * c)).sum() + const
    return loss * (1.0 / B)


def identity_loss(predicted, target) -> float:
    """Mean absolute difference (l1) between predicted and target identity vectors."""
    predicted = np.asarray(predicted, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if predicted.shape != target.shape:
        raise ValueError(f"dimension mismatch {predicted.shape} vs {target.shape}")
    return float(np.abs(predicted - target).mean())


def identity_loss_tensor(predicted: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=np.float64)
    if predicted.shape != target.shape:
        raise ValueError(f"dimension mismatch {predicted.shape} vs {target.shape}")
    return (predicted - target).abs().mean()


def total_loss(score_loss, id_loss, lambda_id: float = 100.0):
    return score_loss + lambda_id * id_loss


# --- condition dropout ---------------------------------------------------------


def apply_condition_dropout(bundle: ConditionBundle, rng, p_each: float = 0.10,
                            p_all: float = 0.10) -> ConditionBundle:
    """NULL every condition for a ``p_all`` fraction of samples, otherwise each one with ``p_each``."""
    B = bundle.batch_size
    drop_all = rng.random(B) < p_all
    drop_each = rng.random((len(CONDITIONS), B)) < p_each
    return bundle.with_keep(**{c: ~(drop_all | drop_each[i]) for i, c in enumerate(CONDITIONS)})


# --- optimiser ------------------------------------------------------------


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.wd = lr, betas, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def step(self):
        if self.lr == 0:
            self.step_count += 1
            return
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.step_count
        c2 = 1 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data - self.lr * ((m / c1) / (np.sqrt(v / c2) + self.eps) + self.wd * p.data)


# --- loop -----------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, last_good: int):
        super().__init__(f"non-finite loss at iteration {iteration}; last good iteration {last_good}")
        self.iteration = iteration
        self.last_good = last_good


@dataclass
class TrainResult:
    trace: list[dict] = field(default_factory=list)
    final_loss: float = float("nan")


def sample_times(rng, n: int, sched: NoiseSchedule, t_floor: float, mode: str = "iid") -> np.ndarray:
    """Times on ``[t_floor*T, T]``, each marginally uniform.

    ``stratified`` shifts one uniform offset across ``n`` equal strata and
    shuffles, which lowers the variance of the batch loss without changing
    any element's distribution.
    """
    T = sched.horizon
    if mode == "iid":
        u = rng.random(n)
    else:
        u = rng.permutation((rng.random() + np.arange(n)) / n)
    return t_floor * T + (T - t_floor * T) * u


def train_loop(config: TrainConfig, corpus: SynthCorpus, network: ScoreNetwork,
               sched: NoiseSchedule, callback=None) -> TrainResult:
    """Optimise ``network`` in place; returns the per-iteration metrics trace."""
    if len(corpus) == 0:
        raise ValueError("corpus is empty")
    V = network.config.vocab
    rng = np.random.default_rng([config.seed, 0x7A1])
    opt = AdamW(network.parameters(), lr=config.lr, betas=(config.beta1, config.beta2),
                eps=config.adam_eps, weight_decay=config.weight_decay)
    result = TrainResult()
    last_good = 0
    for it in range(1, config.iters + 1):
        t0 = time.perf_counter()
        idx = rng.integers(0, len(corpus), size=config.batch)
        batch = corpus.take(idx)
        t = sample_times(rng, config.batch, sched, config.t_floor, config.t_sampling)
        grid_t = forward_sample(batch.grids, sched, t, rng.integers(2 ** 63), V)
        bundle = apply_condition_dropout(batch.bundle(), rng, config.dropout_per_condition,
                                         config.dropout_all)
        log_scores, _ = network.forward(grid_t, sched.sigma_bar(t), bundle)
        l_score = dse_loss_tensor(log_scores, grid_t, batch.grids, sched.sigma(t), sched.sigma_bar(t), V)
        l_id = identity_loss_tensor(network.predict_identity(batch.face), batch.identity)
        loss = total_loss(l_score, l_id, config.lambda_id)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged(it, last_good)
        network.backward(loss)
        opt.step()
        last_good = it
        row = {
            "iter": it,
            "dse_loss": float(l_score.data),
            "id_loss": float(l_id.data),
            "total_loss": value,
            "mask_fraction_mean": float((grid_t == V).mean()),
            "wall_ms": (time.perf_counter() - t0) * 1e3,
        }
        result.trace.append(row)
        result.final_loss = value
        if callback is not None:
            callback(row)
        if it % 500 == 0:
            log.info("iter %d dse %.4f id %.4f", it, row["dse_loss"], row["id_loss"])
    return result


def write_trace(path, trace: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in trace:
            w.writerow({k: (f"{row[k]:.10g}" if isinstance(row[k], float) else row[k]) for k in TRACE_COLUMNS})
