"""Synthetic hierarchical token data with exactly computable posteriors.

Generative process for one utterance of ``L`` frames:

1. a speaker ``s`` is drawn uniformly; emotions are drawn uniformly once per
   block of ``D`` frames; phonemes are drawn i.i.d. uniformly per frame;
2. each low level ``r < k`` emits ``f_r(phoneme_j, s)`` with probability
   ``1 - eps`` and a uniform token otherwise;
3. each high level ``r >= k`` emits ``g_r(x0_j, emotion_j)`` with probability
   ``1 - eps`` and a uniform token otherwise, where ``x0_j`` is the realised
   level-0 token of frame ``j``.

Lip features are one-hot phonemes plus Gaussian noise, face features are a
one-hot speaker plus Gaussian noise, and every speaker owns a fixed unit-norm
identity vector.  Frames are independent given the speaker and the block
emotions, which keeps the exact posterior cheap.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass

import numpy as np

from .conditions import ConditionBundle
from .schedule import NoiseSchedule, score_prefactor
from .token_space import StateSpaceConfig, check_grid, read_corpus, write_corpus

# upper bound on B * L * S * E * V * max(P, V) for the vectorised oracle
ORACLE_MAX_WORK = 2.5e8


@dataclass(frozen=True)
class SynthSpec:
    speakers: int = 8
    emotions: int = 7
    phonemes: int = 8
    vocab: int = 8
    levels: int = 4
    split: int = 1
    frames: int = 8
    emotion_downsample: int = 4
    noise_eps: float = 0.1
    lip_noise: float = 0.1
    face_noise: float = 0.1
    id_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        for name in ("speakers", "emotions", "phonemes", "vocab", "levels"):
            if getattr(self, name) < 2:
                raise ValueError(f"{name} must be >= 2")
        if not 0 <= self.noise_eps < 0.5:
            raise ValueError("noise_eps must lie in [0, 0.5)")
        # validates split and divisibility
        self.state_space()

    def state_space(self) -> StateSpaceConfig:
        return StateSpaceConfig(self.levels, self.frames, self.vocab, self.split,
                                self.emotion_downsample)

    @property
    def emotion_frames(self) -> int:
        return self.frames // self.emotion_downsample

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SynthTables:
    low: np.ndarray       # (k, P, S) token ids
    high: np.ndarray      # (R - k, V, E) token ids
    identity: np.ndarray  # (S, id_dim) unit vectors


def tables(spec: SynthSpec) -> SynthTables:
    rng = np.random.default_rng([spec.seed, 0xF00D])
    k, R, V = spec.split, spec.levels, spec.vocab
    low = rng.integers(0, V, size=(k, spec.phonemes, spec.speakers))
    high = rng.integers(0, V, size=(R - k, V, spec.emotions))
    ident = rng.standard_normal((spec.speakers, spec.id_dim))
    ident /= np.linalg.norm(ident, axis=1, keepdims=True)
    return SynthTables(low=low, high=high, identity=ident)


@dataclass(frozen=True, eq=False)
class SynthCorpus:
    grids: np.ndarray        # (n, R, L)
    phonemes: np.ndarray     # (n, L)
    lip: np.ndarray          # (n, L, P)
    speaker: np.ndarray      # (n,)
    emotion: np.ndarray      # (n, L_emo)
    identity: np.ndarray     # (n, id_dim) identity targets
    face: np.ndarray         # (n, S) inputs of the identity adapter

    def __len__(self):
        return len(self.grids)

    def take(self, idx) -> SynthCorpus:
        return SynthCorpus(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))

    def bundle(self, idx=None, identity=None) -> ConditionBundle:
        """Conditions for ``idx``; ``identity`` overrides the ground-truth identity vectors."""
        c = self if idx is None else self.take(idx)
        return ConditionBundle(lip=c.lip, id=c.identity if identity is None else identity, emo=c.emotion)

    def condition_records(self) -> list[dict]:
        return [
            {
                "phonemes": self.phonemes[i].tolist(),
                "speaker": int(self.speaker[i]),
                "emotions": self.emotion[i].tolist(),
                "identity_target": self.identity[i].tolist(),
                "lip": self.lip[i].tolist(),
                "face": self.face[i].tolist(),
            }
            for i in range(len(self))
        ]


def generate(spec: SynthSpec, n: int, seed=None) -> SynthCorpus:
    """Draw ``n`` utterances.  ``seed`` defaults to one derived from ``spec.seed``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    tab = tables(spec)
    rng = np.random.default_rng([spec.seed, 1] if seed is None else seed)
    S, E, P, V, R, k, L = (spec.speakers, spec.emotions, spec.phonemes, spec.vocab,
                           spec.levels, spec.split, spec.frames)
    D, eps = spec.emotion_downsample, spec.noise_eps

    speaker = rng.integers(0, S, size=n)
    emotion = rng.integers(0, E, size=(n, L // D))
    phon = rng.integers(0, P, size=(n, L))

    def noisy(clean):
        flip = rng.random(clean.shape) < eps
        return np.where(flip, rng.integers(0, V, size=clean.shape), clean)

    grid = np.empty((n, R, L), dtype=np.int64)
    for r in range(k):
        grid[:, r] = noisy(tab.low[r][phon, speaker[:, None]])
    emo_frame = np.repeat(emotion, D, axis=1)
    for r in range(k, R):
        grid[:, r] = noisy(tab.high[r - k][grid[:, 0], emo_frame])

    lip = np.eye(P)[phon] + spec.lip_noise * rng.standard_normal((n, L, P))
    face = np.eye(S)[speaker] + spec.face_noise * rng.standard_normal((n, S))
    return SynthCorpus(grids=grid, phonemes=phon, lip=lip, speaker=speaker, emotion=emotion,
                       identity=tab.identity[speaker], face=face)


def lip_mode(spec: SynthSpec, phonemes: np.ndarray, speaker: np.ndarray) -> np.ndarray:
    """Noise-free low-level tokens ``(n, k, L)`` implied by phonemes and speaker."""
    tab = tables(spec)
    return np.stack([tab.low[r][phonemes, np.asarray(speaker)[:, None]] for r in range(spec.split)], axis=1)


def emotion_mode(spec: SynthSpec, level0: np.ndarray, emotion: np.ndarray) -> np.ndarray:
    """Noise-free high-level tokens ``(n, R-k, L)`` given realised level-0 tokens."""
    tab = tables(spec)
    emo_frame = np.repeat(emotion, spec.emotion_downsample, axis=1)
    return np.stack([tab.high[r][level0, emo_frame] for r in range(spec.levels - spec.split)], axis=1)


# --- exact posterior ---------------------------------------------------------


def _emissions(spec: SynthSpec):
    tab = tables(spec)
    V, eps = spec.vocab, spec.noise_eps
    eye = np.eye(V)
    low = (1 - eps) * eye[tab.low] + eps / V    # (k, P, S, V)
    high = (1 - eps) * eye[tab.high] + eps / V  # (R-k, V, E, V)
    return tab, low, high


def _latent_priors(spec: SynthSpec, bundle: ConditionBundle, B: int, tab: SynthTables):
    S, E, P, L = spec.speakers, spec.emotions, spec.phonemes, spec.frames
    nb = spec.emotion_frames
    spk = np.full((B, S), 1.0 / S)
    emo = np.full((B, nb, E), 1.0 / E)
    lip = np.full((B, L, P), 1.0 / P)
    if bundle is None:
        return spk, emo, lip
    if bundle.id is not None:
        keep = bundle.keep("id")
        nearest = np.argmax(np.asarray(bundle.id) @ tab.identity.T, axis=1)
        spk[keep] = np.eye(S)[nearest[keep]]
    if bundle.emo is not None:
        keep = bundle.keep("emo")
        emo[keep] = np.eye(E)[np.asarray(bundle.emo)[keep]]
    if bundle.lip is not None:
        keep = bundle.keep("lip")
        # Gaussian likelihood of one-hot + noise features; ||e_p||^2 is constant
        logit = np.asarray(bundle.lip) / spec.lip_noise ** 2
        logit -= logit.max(axis=-1, keepdims=True)
        w = np.exp(logit)
        w /= w.sum(axis=-1, keepdims=True)
        lip[keep] = w[keep]
    return spk, emo, lip


def _leave_one_out_prod(x: np.ndarray, axis: int) -> np.ndarray:
    """Product over ``axis`` of all entries except the current one (no division)."""
    x = np.moveaxis(x, axis, 0)
    ones = np.ones_like(x[:1])
    pre = np.cumprod(np.concatenate([ones, x[:-1]]), axis=0)
    suf = np.cumprod(np.concatenate([ones, x[:0:-1]]), axis=0)[::-1]
    return np.moveaxis(pre * suf, 0, axis)


def oracle_posterior(spec: SynthSpec, grid_t, bundle: ConditionBundle | None = None) -> np.ndarray:
    """Exact ``p(x0 = v | unmasked tokens, conditions)`` at every masked position.

    ``grid_t`` has shape ``(B, R, L)`` (or ``(R, L)``).  Returns ``(..., R, L, V)``
    with all-zero rows at unmasked positions.
    """
    grid_t = check_grid(np.asarray(grid_t), spec.vocab)
    single = grid_t.ndim == 2
    if single:
        grid_t = grid_t[None]
    B, R, L = grid_t.shape
    if (R, L) != (spec.levels, spec.frames):
        raise ValueError(f"grid shape {(R, L)} does not match spec {(spec.levels, spec.frames)}")
    if bundle is not None and bundle.batch_size != B:
        raise ValueError("bundle batch size does not match grids")
    S, E, P, V, k, D = (spec.speakers, spec.emotions, spec.phonemes, spec.vocab, spec.split,
                        spec.emotion_downsample)
    work = B * L * S * E * V * max(P, V)
    if work > ORACLE_MAX_WORK:
        raise ValueError(
            f"oracle intractable: B*L*S*E*V*max(P,V) = {work:.3g} exceeds {ORACLE_MAX_WORK:.3g}; "
            "use smaller batches or a smaller SynthSpec"
        )
    tab, low_em, high_em = _emissions(spec)
    spk, emo, lipw = _latent_priors(spec, bundle, B, tab)
    MASK = spec.vocab
    masked = grid_t == MASK
    idx = np.where(masked, 0, grid_t)

    # lowlik[b,j,p,s]: observed low levels 1..k-1 given phoneme and speaker
    lowlik = np.ones((B, L, P, S))
    for r in range(1, k):
        e = np.moveaxis(low_em[r][:, :, idx[:, r]], (2, 3), (0, 1))  # (B, L, P, S)
        lowlik *= np.where(masked[:, r, :, None, None], 1.0, e)
    # highlik[b,j,a,e]: observed high levels given level-0 token and emotion
    highlik = np.ones((B, L, V, E))
    for r in range(k, R):
        e = np.moveaxis(high_em[r - k][:, :, idx[:, r]], (2, 3), (0, 1))  # (B, L, V, E)
        highlik *= np.where(masked[:, r, :, None, None], 1.0, e)
    # level-0 emission restricted to the observed value when unmasked
    A = np.broadcast_to(low_em[0], (B, L, P, S, V)).copy()
    sel0 = np.eye(V)[idx[:, 0]]  # (B, L, V)
    A *= np.where(masked[:, 0, :, None], 1.0, sel0)[:, :, None, None, :]

    W = lipw[:, :, :, None] * lowlik  # (B, L, P, S) prior over phonemes absorbed by lipw
    M = np.einsum("bjps,bjpsa->bjsa", W, A, optimize=True)
    Z = np.einsum("bjsa,bjae->bjse", M, highlik, optimize=True)
    scale = Z.max(axis=(2, 3), keepdims=True)
    scale = np.where(scale > 0, scale, 1.0)
    Z = Z / scale

    emo_frame = np.repeat(emo, D, axis=1)  # (B, L, E) prior of each frame's block emotion
    nb = L // D
    Zb = Z.reshape(B, nb, D, S, E)
    loo = _leave_one_out_prod(Zb, axis=2).reshape(B, L, S, E)  # other frames in the block
    block = np.einsum("bkse,bke->bks", Zb.prod(axis=2), emo)  # (B, nb, S)
    other_blocks = np.repeat(_leave_one_out_prod(block, axis=1), D, axis=1)  # (B, L, S)
    # weight over (s, e) for a target in frame j, excluding frame j's own evidence
    ctx = (spk[:, None, :] * other_blocks)[..., None] * emo_frame[:, :, None, :] * loo
    ctx = ctx / scale  # keeps J on the same scale as Z; cancels after normalising

    post = np.zeros((B, R, L, V))
    for r in range(R):
        if not masked[:, r].any():
            continue
        if r == 0:
            J = np.einsum("bjps,psv,bjve->bjsev", W, low_em[0], highlik, optimize=True)
        elif r < k:
            J = np.einsum("bjps,psv,bjpsa,bjae->bjsev", W, low_em[r], A, highlik, optimize=True)
        else:
            J = np.einsum("bjsa,bjae,aev->bjsev", M, highlik, high_em[r - k], optimize=True)
        p = np.einsum("bjse,bjsev->bjv", ctx, J, optimize=True)
        tot = p.sum(axis=-1, keepdims=True)
        p = p / np.where(tot > 0, tot, 1.0)
        post[:, r] = np.where(masked[:, r, :, None], p, 0.0)
    return post[0] if single else post


def oracle_score(spec: SynthSpec, grid_t, bundle, sched: NoiseSchedule, t=None,
                 sigma_bar=None) -> np.ndarray:
    """Marginal concrete score ``exp(-sb)/(1-exp(-sb)) * posterior``."""
    if sigma_bar is None:
        sigma_bar = sched.sigma_bar(t)
    post = oracle_posterior(spec, grid_t, bundle)
    pref = np.asarray(score_prefactor(sigma_bar), dtype=np.float64)
    return pref.reshape(pref.shape + (1,) * (post.ndim - pref.ndim)) * post


def bayes_accuracy(spec: SynthSpec, grid_t, bundle=None) -> float:
    """Expected accuracy of argmax unmasking under the exact posterior."""
    post = oracle_posterior(spec, grid_t, bundle)
    masked = np.asarray(grid_t) == spec.vocab
    return float(post.max(axis=-1)[masked].mean())


# --- brute-force enumeration (independent of the vectorised oracle) --------


def enumerate_distribution(spec: SynthSpec, speaker=None, emotions=None, phonemes=None) -> np.ndarray:
    """Exact distribution over all ``V**(R*L)`` grids, summing out every latent.

    Optional arguments pin the corresponding latents.  Grid index ``i`` is the
    row-major flattening of the ``(R, L)`` grid in base ``V``.
    """
    R, L, V, k, D = spec.levels, spec.frames, spec.vocab, spec.split, spec.emotion_downsample
    if V ** (R * L) > 2 ** 20:
        raise ValueError("grid space too large to enumerate")
    tab = tables(spec)
    eps = spec.noise_eps

    def emit(clean, v):
        return (1 - eps) * (v == clean) + eps / V

    cols = list(itertools.product(range(V), repeat=R))
    speakers = range(spec.speakers) if speaker is None else [speaker]
    n_blocks = L // D

    def column_dist(p, s, e):
        out = np.empty(len(cols))
        for ci, col in enumerate(cols):
            pr = 1.0
            for r in range(k):
                pr *= emit(tab.low[r][p, s], col[r])
            for r in range(k, R):
                pr *= emit(tab.high[r - k][col[0], e], col[r])
            out[ci] = pr
        return out

    # phonemes are iid per frame and emotions iid per block, so each frame mixes
    # over its phoneme and each block over its emotion before taking products
    def frame_dist(j, s, e):
        ps = range(spec.phonemes) if phonemes is None else [phonemes[j]]
        return sum(column_dist(p, s, e) for p in ps) / len(ps)

    def block_dist(b, s):
        es = range(spec.emotions) if emotions is None else [emotions[b]]
        acc = 0.0
        for e in es:
            part = np.ones(1)
            for j in range(b * D, (b + 1) * D):
                part = np.outer(part, frame_dist(j, s, e)).ravel()
            acc = acc + part
        return acc / len(es)

    total = np.zeros(V ** (R * L))
    for s in speakers:
        joint = np.ones(1)
        for b in range(n_blocks):
            joint = np.outer(joint, block_dist(b, s)).ravel()
        # joint is indexed by (col_0, ..., col_{L-1}); reorder to (R, L) row-major
        total += _columns_to_grid_order(joint, R, L, V) / len(speakers)
    return total


def _columns_to_grid_order(joint: np.ndarray, R: int, L: int, V: int) -> np.ndarray:
    arr = joint.reshape((V,) * (R * L))  # axes: (j0 r0, j0 r1, ..., j1 r0, ...)
    order = [j * R + r for r in range(R) for j in range(L)]
    return arr.transpose(order).ravel()


def grid_index(grids: np.ndarray, V: int) -> np.ndarray:
    """Row-major base-V index of each ``(R, L)`` grid in ``grids`` ``(n, R, L)``."""
    flat = np.asarray(grids).reshape(len(grids), -1)
    weights = V ** np.arange(flat.shape[1] - 1, -1, -1)
    return flat @ weights


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def write_sidecar(path, corpus: SynthCorpus) -> None:
    with open(path, "w") as fh:
        for rec in corpus.condition_records():
            fh.write(json.dumps(rec) + "\n")


def read_sidecar(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def sidecar_path(path) -> str:
    return str(path) + ".jsonl"


def save_corpus(path, corpus: SynthCorpus, spec: SynthSpec) -> None:
    """Binary token records at ``path`` plus the condition sidecar next to it."""
    write_corpus(path, corpus.grids, spec.state_space())
    write_sidecar(sidecar_path(path), corpus)


def corpus_from_records(grids: np.ndarray, records: list[dict], spec: SynthSpec) -> SynthCorpus:
    if len(records) != len(grids):
        raise ValueError(f"{len(grids)} token records but {len(records)} condition records")
    def col(key, dtype):
        return np.asarray([r[key] for r in records], dtype=dtype)

    speaker = col("speaker", np.int64)
    face = col("face", np.float64) if records and "face" in records[0] else np.eye(spec.speakers)[speaker]
    return SynthCorpus(grids=np.asarray(grids), phonemes=col("phonemes", np.int64), lip=col("lip", np.float64),
                       speaker=speaker, emotion=col("emotions", np.int64),
                       identity=col("identity_target", np.float64), face=face)


def load_corpus(path, spec: SynthSpec) -> SynthCorpus:
    grids, header = read_corpus(path)
    expect = spec.state_space()
    for key in ("levels", "frames", "vocab", "split"):
        if header[key] != getattr(expect, key):
            raise ValueError(f"{path}: corpus {key}={header[key]} but config has {getattr(expect, key)}")
    return corpus_from_records(grids, read_sidecar(sidecar_path(path)), spec)
