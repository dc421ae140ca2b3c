"""Hierarchical token grids, the MASK state and the low/high level partition.

Grids are stored as integer arrays whose last two axes are ``(levels, frames)``.
Levels are 0-indexed in storage; level 0 is the coarsest codebook.  The MASK
state of a vocabulary of size ``V`` is the id ``V``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

MAGIC = b"HCDT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIIIII")  # magic, version, R, L, V, k, n_records


def mask_id(vocab_size: int) -> int:
    return int(vocab_size)


@dataclass(frozen=True)
class LevelPartition:
    """Levels ``[0, split_index)`` are low, ``[split_index, levels)`` are high."""

    split_index: int = 2

    def check(self, levels: int) -> None:
        if not 1 <= self.split_index < levels:
            raise ValueError(
                f"split index {self.split_index} out of range for {levels} levels "
                f"(need 1 <= k < {levels})"
            )


@dataclass(frozen=True)
class StateSpaceConfig:
    levels: int = 12
    frames: int = 50
    vocab: int = 1024
    split: int = 2
    emotion_downsample: int = 25

    def __post_init__(self):
        if self.levels < 2 or self.frames < 1 or self.vocab < 2:
            raise ValueError(f"degenerate state space {self}")
        LevelPartition(self.split).check(self.levels)
        if self.frames % self.emotion_downsample:
            raise ValueError(
                f"frames={self.frames} not divisible by emotion_downsample="
                f"{self.emotion_downsample}"
            )

    @property
    def emotion_frames(self) -> int:
        return self.frames // self.emotion_downsample

    @property
    def mask_id(self) -> int:
        return self.vocab

    @property
    def partition(self) -> LevelPartition:
        return LevelPartition(self.split)


@dataclass(frozen=True, eq=False)
class TokenGrid:
    """A single R x L grid of token ids in ``{0..V-1} U {MASK}``."""

    values: np.ndarray
    vocab_size: int

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ValueError(f"grid must be 2-D (levels, frames), got shape {values.shape}")
        if not np.issubdtype(values.dtype, np.integer):
            raise TypeError(f"grid values must be integers, got {values.dtype}")
        if values.size and (values.min() < 0 or values.max() > self.vocab_size):
            raise ValueError(f"token ids must lie in [0, {self.vocab_size}]")
        values = values.astype(np.int64, copy=True)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def levels(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]

    @property
    def mask_id(self) -> int:
        return self.vocab_size

    def split(self, part: LevelPartition) -> tuple[TokenGrid, TokenGrid]:
        low, high = split(self.values, part)
        return TokenGrid(low, self.vocab_size), TokenGrid(high, self.vocab_size)

    def mask_fraction(self) -> float:
        return mask_fraction(self.values, self.vocab_size)

    def __eq__(self, other):
        if not isinstance(other, TokenGrid):
            return NotImplemented
        return self.vocab_size == other.vocab_size and np.array_equal(self.values, other.values)


def split(grid: np.ndarray, part: LevelPartition | int) -> tuple[np.ndarray, np.ndarray]:
    """Split along the level axis (second to last) into low and high components."""
    if isinstance(part, int):
        part = LevelPartition(part)
    grid = np.asarray(grid)
    part.check(grid.shape[-2])
    k = part.split_index
    return grid[..., :k, :], grid[..., k:, :]


def merge(low: np.ndarray, high: np.ndarray) -> np.ndarray:
    if low.shape[-1] != high.shape[-1]:
        raise ValueError("low and high components must share the frame count")
    return np.concatenate([low, high], axis=-2)


def mask_fraction(grid: np.ndarray, vocab_size: int) -> float:
    grid = np.asarray(grid)
    if grid.size == 0:
        return 0.0
    return float(np.count_nonzero(grid == mask_id(vocab_size)) / grid.size)


def check_grid(grid: np.ndarray, vocab_size: int, allow_mask: bool = True) -> np.ndarray:
    grid = np.asarray(grid)
    if not np.issubdtype(grid.dtype, np.integer):
        raise TypeError(f"token grid must hold integers, got {grid.dtype}")
    top = vocab_size if allow_mask else vocab_size - 1
    if grid.size and (grid.min() < 0 or grid.max() > top):
        raise ValueError(f"token ids must lie in [0, {top}]")
    return grid


# --- corpus files -----------------------------------------------------------


def write_corpus(path, grids: np.ndarray, config: StateSpaceConfig) -> None:
    """Write grids ``(n, R, L)`` in the little-endian binary record format."""
    grids = check_grid(np.asarray(grids), config.vocab)
    if grids.ndim != 3 or grids.shape[1:] != (config.levels, config.frames):
        raise ValueError(
            f"expected grids of shape (n, {config.levels}, {config.frames}), got {grids.shape}"
        )
    if config.vocab + 1 > np.iinfo(np.uint16).max:
        raise ValueError("vocabulary too large for u16 token records")
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION, config.levels, config.frames, config.vocab, config.split, len(grids)
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(grids.astype("<u2").tobytes())


def read_corpus(path) -> tuple[np.ndarray, dict]:
    """Return ``(grids, header)``; header holds R, L, V, k and the record count."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, R, L, V, k, n = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    body = data[_HEADER.size:]
    if len(body) != 2 * n * R * L:
        raise ValueError(f"{path}: expected {n} records of {R}x{L} tokens, got {len(body)} bytes")
    grids = np.frombuffer(body, dtype="<u2").astype(np.int64).reshape(n, R, L)
    check_grid(grids, V)
    return grids, {"levels": R, "frames": L, "vocab": V, "split": k, "records": n}


def write_corpus_jsonl(path, grids: Iterable[np.ndarray], vocab_size: int) -> None:
    """Debugging alternative: one JSON object per line, MASK written as ``null``."""
    with open(path, "w") as fh:
        for g in grids:
            g = check_grid(np.asarray(g), vocab_size)
            rows = [[None if v == vocab_size else int(v) for v in row] for row in g]
            fh.write(json.dumps({"vocab": vocab_size, "tokens": rows}) + "\n")


def read_corpus_jsonl(path) -> np.ndarray:
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            V = rec["vocab"]
            out.append([[V if v is None else v for v in row] for row in rec["tokens"]])
    return np.asarray(out, dtype=np.int64)
