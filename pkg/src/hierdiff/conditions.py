"""Batched conditioning signals with per-sample NULL masks."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

CONDITIONS = ("lip", "id", "emo")


@dataclass(frozen=True, eq=False)
class ConditionBundle:
    """Conditions for a batch of ``B`` grids.

    ``lip`` is ``(B, L, lip_dim)``, ``id`` is ``(B, id_dim)`` and ``emo`` holds
    ``(B, L_emo)`` emotion class ids.  A field set to ``None`` is NULL for the
    whole batch; ``keep_<name>`` optionally NULLs individual samples.
    """

    lip: np.ndarray | None = None
    id: np.ndarray | None = None
    emo: np.ndarray | None = None
    keep_lip: np.ndarray | None = None
    keep_id: np.ndarray | None = None
    keep_emo: np.ndarray | None = None
    batch: int | None = None

    def __post_init__(self):
        sizes = {len(v) for v in (self.lip, self.id, self.emo) if v is not None}
        if self.batch is not None:
            sizes.add(self.batch)
        if len(sizes) > 1:
            raise ValueError(f"inconsistent batch sizes in bundle: {sizes}")
        if self.batch is None and sizes:
            object.__setattr__(self, "batch", sizes.pop())
        for name in CONDITIONS:
            keep = getattr(self, "keep_" + name)
            if keep is not None:
                keep = np.asarray(keep, dtype=bool)
                if keep.shape != (self.batch,):
                    raise ValueError(f"keep_{name} must have shape ({self.batch},)")
                object.__setattr__(self, "keep_" + name, keep)

    @property
    def batch_size(self) -> int:
        if self.batch is None:
            raise ValueError("bundle has no batch size; pass batch= for all-NULL bundles")
        return self.batch

    def keep(self, name: str) -> np.ndarray:
        """Boolean ``(B,)`` mask of samples where the condition is present."""
        if getattr(self, name) is None:
            return np.zeros(self.batch_size, dtype=bool)
        keep = getattr(self, "keep_" + name)
        return np.ones(self.batch_size, dtype=bool) if keep is None else keep

    def with_keep(self, **masks) -> ConditionBundle:
        upd = {}
        for name, mask in masks.items():
            if name not in CONDITIONS:
                raise KeyError(name)
            upd["keep_" + name] = np.asarray(mask, dtype=bool) & self.keep(name)
        return replace(self, **upd)

    def null(self) -> ConditionBundle:
        return ConditionBundle(batch=self.batch_size)

    def only(self, name: str) -> ConditionBundle:
        return self.with_keep(**{c: np.zeros(self.batch_size, bool) for c in CONDITIONS if c != name})

    def all_null(self) -> np.ndarray:
        return ~(self.keep("lip") | self.keep("id") | self.keep("emo"))

    def take(self, idx) -> ConditionBundle:
        idx = np.asarray(idx)

        def sel(a):
            return None if a is None else a[idx]

        return ConditionBundle(
            lip=sel(self.lip), id=sel(self.id), emo=sel(self.emo),
            keep_lip=sel(self.keep_lip), keep_id=sel(self.keep_id), keep_emo=sel(self.keep_emo),
            batch=len(np.arange(self.batch_size)[idx]),
        )

    @staticmethod
    def concat(bundles) -> ConditionBundle:
        """Stack bundles along the batch axis; a NULL field becomes per-sample NULL."""
        bundles = list(bundles)
        total = sum(b.batch_size for b in bundles)
        kw = {"batch": total}
        for name in CONDITIONS:
            present = [b for b in bundles if getattr(b, name) is not None]
            if not present:
                continue
            proto = getattr(present[0], name)
            parts = []
            for b in bundles:
                a = getattr(b, name)
                parts.append(a if a is not None else np.zeros((b.batch_size,) + proto.shape[1:], proto.dtype))
            kw[name] = np.concatenate(parts)
            kw["keep_" + name] = np.concatenate([b.keep(name) for b in bundles])
        return ConditionBundle(**kw)
