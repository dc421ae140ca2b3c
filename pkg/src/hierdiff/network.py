"""Hierarchical two-tier score network.

Low-level tokens are predicted from a block stack that sees the lip sequence
(channel concatenation) and the identity vector (single-scale AdaLN).  High-level
tokens come from a second stack that receives a projection of the low-tier
output and is modulated by emotion through dual-scale AdaLN: a channel-wise
scale/shift from pooled emotion, times a per-emotion-block temporal scale that is
up-sampled to frame rate with a Kronecker product against an all-ones vector.

Two ablations share the code: ``variant="flat"`` runs one stack over all levels
with every condition injected everywhere, and ``adaln="single"`` drops the
temporal scale so the emotion enters only through its pooled embedding.
"""

from __future__ import annotations

import contextlib
import json
import math
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autograd as ag
from .autograd import MLP, Linear, Module, Tensor, concat, embedding, parameter, where
from .conditions import ConditionBundle

CKPT_MAGIC = b"HCKP"
CKPT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    levels: int = 4
    vocab: int = 8
    split: int = 1
    channels: int = 64
    heads: int = 4
    low_blocks: int = 2
    high_blocks: int = 2
    mlp_ratio: int = 4
    lip_dim: int = 8
    id_dim: int = 16
    face_dim: int = 8
    emo_classes: int = 7
    emotion_downsample: int = 4
    time_features: int = 32
    variant: str = "hierarchical"  # or "flat"
    adaln: str = "dual"  # or "single"
    seed: int = 0

    def __post_init__(self):
        if self.channels % self.heads:
            raise ValueError(f"channels={self.channels} not divisible by heads={self.heads}")
        if not 1 <= self.split < self.levels:
            raise ValueError("split must satisfy 1 <= split < levels")
        if self.variant not in ("hierarchical", "flat"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.adaln not in ("dual", "single"):
            raise ValueError(f"unknown adaln {self.adaln!r}")
        if self.time_features % 2:
            raise ValueError("time_features must be even")

    @classmethod
    def paper(cls, **kw) -> NetworkConfig:
        """Full-size defaults: 12 levels of 1024 codes, 8+8 blocks, 768 channels, 12 heads."""
        base = dict(levels=12, vocab=1024, split=2, channels=768, heads=12, low_blocks=8,
                    high_blocks=8, emotion_downsample=25, time_features=256)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


def time_features(sigma_bar: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of ``log sigma_bar``; returns ``(B, dim)``."""
    x = np.log(np.maximum(np.asarray(sigma_bar, dtype=np.float64), 1e-12))
    half = dim // 2
    freqs = np.exp(np.linspace(math.log(0.05), math.log(8.0), half))
    arg = x[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def kron_upsample_matrix(n_blocks: int, block: int) -> np.ndarray:
    """``I_{n_blocks} (x) 1_block^T``: maps per-block values to per-frame values."""
    return np.kron(np.eye(n_blocks), np.ones((1, block)))


def upsample_temporal(scale, block: int):
    """Up-sample ``(..., L_emo)`` temporal scales to ``(..., L_emo*block)`` frames.

    Frame ``j`` receives ``scale[..., j // block]``.
    """
    scale = ag.as_tensor(scale)
    return scale @ kron_upsample_matrix(scale.shape[-1], block)


class Attention(Module):
    def __init__(self, rng, C, H):
        super().__init__()
        self.H = H
        self.q = Linear(rng, C, C)
        self.k = Linear(rng, C, C)
        self.v = Linear(rng, C, C)
        self.out = Linear(rng, C, C)

    def __call__(self, x):
        B, L, C = x.shape
        H, dh = self.H, C // self.H

        def heads(t):
            return t.reshape(B, L, H, dh).transpose(0, 2, 1, 3)

        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        att = ((q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))).softmax(axis=-1)
        y = (att @ v).transpose(0, 2, 1, 3).reshape(B, L, C)
        return self.out(y)


def modulate(x, shift, scale):
    """``(1 + scale) * LN(x) + shift`` with per-sample ``(B, C)`` parameters."""
    return x.layer_norm() * (scale.reshape(scale.shape[0], 1, -1) + 1.0) + shift.reshape(shift.shape[0], 1, -1)


class Block(Module):
    """Pre-norm transformer block with AdaLN modulation and gated residuals.

    ``mod`` is ``(B, 6C)`` holding ``alpha1, gamma1, beta1, alpha2, gamma2, beta2``.
    ``temporal`` is either ``None`` or per-frame scales ``(B, 2, L)`` multiplying
    the modulated activations before attention and feed-forward.
    """

    def __init__(self, rng, C, H, mlp_ratio):
        super().__init__()
        self.attn = Attention(rng, C, H)
        self.mlp = MLP(rng, C, mlp_ratio * C, C, act="gelu")

    def __call__(self, x, mod, temporal=None):
        C = x.shape[-1]
        B = x.shape[0]
        a1, g1, b1, a2, g2, b2 = (mod[:, i * C:(i + 1) * C] for i in range(6))
        h = modulate(x, b1, g1)
        if temporal is not None:
            h = h * temporal[:, 0, :].reshape(B, -1, 1)
        x = x + self.attn(h) * a1.reshape(B, 1, C)
        h = modulate(x, b2, g2)
        if temporal is not None:
            h = h * temporal[:, 1, :].reshape(B, -1, 1)
        return x + self.mlp(h) * a2.reshape(B, 1, C)


class TemporalScale(Module):
    """Per-emotion-block scale pair from ``[c_emo; time]``; starts at all-ones."""

    def __init__(self, rng, d_in, C):
        super().__init__()
        self.fc1 = Linear(rng, d_in, C)
        self.fc2 = Linear(rng, C, 2, zero=True)
        self.fc2.bias.data[:] = 1.0

    def __call__(self, c_emo, t_emb):
        B, n, C = c_emo.shape
        t = t_emb.reshape(B, 1, -1) * np.ones((1, n, 1))
        return self.fc2(self.fc1(concat([c_emo, t], axis=-1)).silu()).transpose(0, 2, 1)  # (B, 2, n)


@dataclass
class Hidden:
    h_low: Tensor | None
    h_high: Tensor | None
    h_flat: Tensor | None = None
    gamma_t_blocks: list | None = None
    gamma_t_frames: list | None = None


class ScoreNetwork(Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        cfg = config
        self.config = cfg
        rng = np.random.default_rng([cfg.seed, 0x5C0])
        C, V, R, k = cfg.channels, cfg.vocab, cfg.levels, cfg.split
        self.tok_emb = parameter(rng.normal(0, 0.5, size=(R * (V + 1), C)))
        self.time_mlp = MLP(rng, cfg.time_features, C, C)
        self.lip_adapter = MLP(rng, cfg.lip_dim, C, C)
        self.id_adapter = MLP(rng, cfg.face_dim, C, cfg.id_dim)
        self.emo_table = parameter(rng.normal(0, 1.0, size=(cfg.emo_classes, C)))
        self.null_lip = parameter(rng.normal(0, 0.1, size=C))
        self.null_id = parameter(rng.normal(0, 0.1, size=cfg.id_dim))
        self.null_emo = parameter(rng.normal(0, 0.1, size=C))
        self.lip_fuse = Linear(rng, 2 * C, C)

        if cfg.variant == "hierarchical":
            self.low_blocks = [Block(rng, C, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.low_blocks)]
            self.low_mod = [MLP(rng, cfg.id_dim + C, C, 6 * C, zero_out=True) for _ in range(cfg.low_blocks)]
            self.high_blocks = [Block(rng, C, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.high_blocks)]
            self.high_mod = [MLP(rng, 2 * C, C, 6 * C, zero_out=True) for _ in range(cfg.high_blocks)]
            if cfg.adaln == "dual":
                self.high_temporal = [TemporalScale(rng, 2 * C, C) for _ in range(cfg.high_blocks)]
            self.low_to_high = Linear(rng, C, C)
            self.head_low_w = parameter(rng.normal(0, 0.02, size=(k, C, V)))
            self.head_low_b = parameter(np.zeros((k, 1, V)))
            self.head_high_w = parameter(rng.normal(0, 0.02, size=(R - k, C, V)))
            self.head_high_b = parameter(np.zeros((R - k, 1, V)))
        else:
            n = cfg.low_blocks + cfg.high_blocks
            self.flat_blocks = [Block(rng, C, cfg.heads, cfg.mlp_ratio) for _ in range(n)]
            self.flat_mod = [MLP(rng, cfg.id_dim + 2 * C, C, 6 * C, zero_out=True) for _ in range(n)]
            if cfg.adaln == "dual":
                self.flat_temporal = [TemporalScale(rng, 2 * C, C) for _ in range(n)]
            self.head_w = parameter(rng.normal(0, 0.02, size=(R, C, V)))
            self.head_b = parameter(np.zeros((R, 1, V)))

    # -- pieces -------------------------------------------------------------

    def time_embedding(self, sigma_bar) -> Tensor:
        return self.time_mlp(time_features(np.atleast_1d(sigma_bar), self.config.time_features))

    def embed_component(self, tokens: np.ndarray, first_level: int, t_emb: Tensor) -> Tensor:
        """Sum of per-level token embeddings ``(B, n, L) -> (B, L, C)`` plus the time term."""
        tokens = np.asarray(tokens)
        V = self.config.vocab
        if tokens.size and (tokens.min() < 0 or tokens.max() > V):
            raise ValueError(f"token ids must lie in [0, {V}]")
        B, n, L = tokens.shape
        offs = (first_level + np.arange(n))[None, :, None] * (V + 1)
        e = embedding(self.tok_emb, tokens + offs)  # (B, n, L, C)
        return e.sum(axis=1) + t_emb.reshape(B, 1, -1)

    def lip_features(self, bundle: ConditionBundle, B: int, L: int):
        """Adapted lip sequence ``(B, L, C)`` or ``None`` when NULL for the whole batch."""
        keep = bundle.keep("lip") if bundle is not None and bundle.lip is not None else np.zeros(B, bool)
        if not keep.any():
            return None
        lip = np.asarray(bundle.lip, dtype=np.float64)
        if lip.shape[:2] != (B, L):
            raise ValueError(f"lip length {lip.shape[1]} does not match {L} frames")
        feat = self.lip_adapter(lip)
        return where(keep[:, None, None], feat, self.null_lip)

    def id_features(self, bundle: ConditionBundle, B: int):
        keep = bundle.keep("id") if bundle is not None and bundle.id is not None else np.zeros(B, bool)
        if not keep.any():
            return self.null_id.reshape(1, -1) * np.ones((B, 1))
        return where(keep[:, None], np.asarray(bundle.id, dtype=np.float64), self.null_id)

    def emo_features(self, bundle: ConditionBundle, B: int, n_blocks: int):
        C = self.config.channels
        keep = bundle.keep("emo") if bundle is not None and bundle.emo is not None else np.zeros(B, bool)
        null = self.null_emo.reshape(1, 1, C) * np.ones((B, n_blocks, 1))
        if not keep.any():
            return null
        emo = np.asarray(bundle.emo)
        if emo.shape != (B, n_blocks):
            raise ValueError(f"emotion sequence must have shape ({B}, {n_blocks}), got {emo.shape}")
        return where(keep[:, None, None], embedding(self.emo_table, emo), null)

    def predict_identity(self, face) -> Tensor:
        return self.id_adapter(np.asarray(face, dtype=np.float64))

    def fuse_lip(self, hidden: Tensor, c_lip) -> Tensor:
        B, L, C = hidden.shape
        if c_lip is None:
            c_lip = self.null_lip.reshape(1, 1, C) * np.ones((B, L, 1))
        if c_lip.shape[:2] != (B, L):
            raise ValueError("lip features and hidden sequence differ in length")
        return self.lip_fuse(concat([hidden, c_lip], axis=-1))

    def low_forward(self, hidden: Tensor, c_lip, c_id: Tensor, t_emb: Tensor) -> Tensor:
        x = self.fuse_lip(hidden, c_lip)
        cond = concat([c_id, t_emb], axis=-1)
        for blk, mod in zip(self.low_blocks, self.low_mod):
            x = blk(x, mod(cond))
        return x

    def temporal_scales(self, temporal_mlps, c_emo, t_emb, hidden=None):
        D = self.config.emotion_downsample
        blocks, frames = [], []
        for tm in temporal_mlps:
            g = tm(c_emo, t_emb)
            blocks.append(g)
            frames.append(upsample_temporal(g, D))
        if hidden is not None:
            hidden.gamma_t_blocks, hidden.gamma_t_frames = blocks, frames
        return frames

    def high_forward(self, h_low: Tensor, hidden_high: Tensor, c_emo: Tensor, t_emb: Tensor,
                     hidden: Hidden | None = None) -> Tensor:
        B, L, C = hidden_high.shape
        if c_emo.shape[1] * self.config.emotion_downsample != L:
            raise ValueError(f"emotion length {c_emo.shape[1]} != L/D = {L}/{self.config.emotion_downsample}")
        x = hidden_high + self.low_to_high(h_low)
        cond = concat([c_emo.mean(axis=1), t_emb], axis=-1)
        temporal = [None] * len(self.high_blocks)
        if self.config.adaln == "dual":
            temporal = self.temporal_scales(self.high_temporal, c_emo, t_emb, hidden)
        for blk, mod, tmp in zip(self.high_blocks, self.high_mod, temporal):
            x = blk(x, mod(cond), tmp)
        return x

    def score_heads(self, h_low: Tensor, h_high: Tensor) -> Tensor:
        """Log-scores ``(B, R, L, V)``: low levels read ``h_low``, high levels ``h_high``."""
        B, L, C = h_low.shape
        lo = h_low.reshape(B, 1, L, C) @ self.head_low_w + self.head_low_b
        hi = h_high.reshape(B, 1, L, C) @ self.head_high_w + self.head_high_b
        return concat([lo, hi], axis=1)

    # -- full passes --------------------------------------------------------

    def forward(self, grid_t, sigma_bar, bundle: ConditionBundle | None = None):
        """Return ``(log_scores, hidden)`` for grids ``(B, R, L)`` at noise levels ``sigma_bar``."""
        cfg = self.config
        grid_t = np.asarray(grid_t)
        if grid_t.ndim != 3 or grid_t.shape[1] != cfg.levels:
            raise ValueError(f"expected grids (B, {cfg.levels}, L), got {grid_t.shape}")
        B, R, L = grid_t.shape
        if L % cfg.emotion_downsample:
            raise ValueError(f"frames {L} not divisible by emotion_downsample {cfg.emotion_downsample}")
        n_blocks = L // cfg.emotion_downsample
        sb = np.broadcast_to(np.asarray(sigma_bar, dtype=np.float64), (B,))
        t_emb = self.time_embedding(sb)
        c_lip = self.lip_features(bundle, B, L)
        c_id = self.id_features(bundle, B)
        c_emo = self.emo_features(bundle, B, n_blocks)
        k = cfg.split
        if cfg.variant == "flat":
            x = self.fuse_lip(self.embed_component(grid_t, 0, t_emb), c_lip)
            cond = concat([c_id, c_emo.mean(axis=1), t_emb], axis=-1)
            hidden = Hidden(None, None)
            temporal = [None] * len(self.flat_blocks)
            if cfg.adaln == "dual":
                temporal = self.temporal_scales(self.flat_temporal, c_emo, t_emb, hidden)
            for blk, mod, tmp in zip(self.flat_blocks, self.flat_mod, temporal):
                x = blk(x, mod(cond), tmp)
            hidden.h_flat = x
            logits = x.reshape(B, 1, L, -1) @ self.head_w + self.head_b
            return logits, hidden
        m_low = self.embed_component(grid_t[:, :k], 0, t_emb)
        m_high = self.embed_component(grid_t[:, k:], k, t_emb)
        h_low = self.low_forward(m_low, c_lip, c_id, t_emb)
        hidden = Hidden(h_low, None)
        h_high = self.high_forward(h_low, m_high, c_emo, t_emb, hidden)
        hidden.h_high = h_high
        return self.score_heads(h_low, h_high), hidden

    def log_score(self, grid_t, sigma_bar, bundle=None) -> np.ndarray:
        with no_grad_for(self):
            logits, _ = self.forward(grid_t, sigma_bar, bundle)
        return logits.data

    def score(self, grid_t, sigma_bar, bundle=None) -> np.ndarray:
        return np.exp(self.log_score(grid_t, sigma_bar, bundle))

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


@contextlib.contextmanager
def no_grad_for(module: Module):
    params = module.parameters()
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


# --- checkpoints ------------------------------------------------------------


def save_checkpoint(path, net: ScoreNetwork, extra: dict | None = None) -> None:
    """Binary checkpoint: magic, version, JSON config, then named f64 tensors."""
    meta = json.dumps({"config": net.config.to_dict(), "extra": extra or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<HI", CKPT_VERSION, len(meta)))
        fh.write(meta)
        params = list(net.named_parameters())
        fh.write(struct.pack("<I", len(params)))
        for name, p in params:
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path, expect: NetworkConfig | None = None) -> tuple[ScoreNetwork, dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, mlen = struct.unpack_from("<HI", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 10
    meta = json.loads(buf[off:off + mlen])
    off += mlen
    known = {f.name for f in fields(NetworkConfig)}
    unknown = set(meta["config"]) - known
    if unknown:
        raise ValueError(f"{path}: unknown config fields {sorted(unknown)}")
    cfg = NetworkConfig(**meta["config"])
    if expect is not None and expect != cfg:
        raise ValueError(f"checkpoint config {cfg} does not match expected {expect}")
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + nlen].decode()
        off += nlen
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        state[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(dims).astype(np.float64)
        off += 8 * size
    net = ScoreNetwork(cfg)
    net.load_state_dict(state)
    return net, meta.get("extra", {})
