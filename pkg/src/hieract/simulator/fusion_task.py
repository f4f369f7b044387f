"""Synthetic multi-level predictions for training and comparing fusion strategies."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..hierarchy import LabelHierarchy


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fusion_task(
    h: LabelHierarchy,
    num_samples: int,
    seed: int = 0,
    *,
    fine_strength: float = 3.0,
    coarse_strength: float | Sequence[float] = 3.0,
    noise: float = 1.0,
    coarse_flip: float | Sequence[float] = 0.0,
) -> tuple[list[np.ndarray], np.ndarray]:
    """Per-level distributions whose levels carry complementary evidence.

    The fine head is equally drawn to the true leaf and to a decoy leaf from
    a different top-level branch, so it alone cannot tell them apart.  Every
    coarser head points at the true ancestor but says nothing about which
    sibling is right.  ``coarse_strength`` and ``coarse_flip`` may be given
    per coarse level; with probability ``coarse_flip`` that level's evidence
    lands on a random wrong node instead.  Returns ``(per_level, labels)``.
    """
    rng = np.random.default_rng(seed)
    m = h.level_sizes[-1]
    paths = h.path_table
    y = rng.integers(0, m, size=num_samples)
    # decoy: a leaf whose level-0 ancestor differs, when the tree has one
    decoy = y.copy()
    for k in range(num_samples):
        others = np.flatnonzero(paths[:, 0] != paths[y[k], 0])
        pool = others if others.size else np.flatnonzero(np.arange(m) != y[k])
        if pool.size:
            decoy[k] = rng.choice(pool)
    rows = np.arange(num_samples)
    n_coarse = h.num_levels - 1
    strength = np.broadcast_to(np.asarray(coarse_strength, dtype=np.float64), (n_coarse,))
    flip = np.broadcast_to(np.asarray(coarse_flip, dtype=np.float64), (n_coarse,))

    per_level = []
    for i, size in enumerate(h.level_sizes):
        z = noise * rng.normal(size=(num_samples, size))
        if i == h.num_levels - 1:
            z[rows, y] += fine_strength
            z[rows, decoy] += fine_strength
        else:
            target = paths[y, i].copy()
            wrong = rng.uniform(size=num_samples) < flip[i]
            if size > 1 and wrong.any():
                shift = rng.integers(1, size, size=int(wrong.sum()))
                target[wrong] = (target[wrong] + shift) % size
            z[rows, target] += strength[i]
        per_level.append(_softmax(z))
    return per_level, y
