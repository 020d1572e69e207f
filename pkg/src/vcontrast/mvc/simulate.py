"""Embedding records with prescribed cosine similarities.

The synthetic images carry no real encoder, so the two encoder spaces are
simulated: each record is built from random vectors whose cosine equals a
drawn target. Per-category target distributions make the detail space
harder to separate for counts than for objects.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .store import EmbeddingRecord

# (mean, sd) of target cosine per category: semantic space, then detail space
SIM_PROFILE = {
    "object": ((0.76, 0.08), (0.42, 0.12)),
    "attribute": ((0.80, 0.07), (0.47, 0.12)),
    "count": ((0.78, 0.08), (0.55, 0.12)),
    "position": ((0.82, 0.06), (0.70, 0.10)),
}


def vectors_with_cosine(rng: np.random.Generator, dim: int, sim: float) -> tuple[np.ndarray, np.ndarray]:
    """Two random unit vectors whose cosine is ``sim`` (up to float32 rounding)."""
    if dim < 2:
        raise ValueError("need dim >= 2")
    if not -1 <= sim <= 1:
        raise ValueError("sim must lie in [-1, 1]")
    u = rng.normal(size=dim)
    u /= np.linalg.norm(u)
    w = rng.normal(size=dim)
    w -= (w @ u) * u
    w /= np.linalg.norm(w)
    v = sim * u + np.sqrt(max(0.0, 1 - sim * sim)) * w
    return u, v


def simulated_records(pair_ids: Sequence[str], categories: Sequence[str], seed: int,
                      clip_dim: int = 16, dino_dim: int = 16) -> list[EmbeddingRecord]:
    if len(pair_ids) != len(categories):
        raise ValueError("pair_ids and categories differ in length")
    rng = np.random.default_rng([seed, 3])
    out = []
    for pid, cat in zip(pair_ids, categories):
        (mc, sc), (md, sd) = SIM_PROFILE[cat]
        clip_sim = float(np.clip(rng.normal(mc, sc), -0.99, 0.99))
        dino_sim = float(np.clip(rng.normal(md, sd), -0.99, 0.99))
        ca, cb = vectors_with_cosine(rng, clip_dim, clip_sim)
        da, db = vectors_with_cosine(rng, dino_dim, dino_sim)
        out.append(EmbeddingRecord(pid, ca, cb, da, db, cat))
    return out
