"""Synthetic indoor-like scenes with hierarchically structured features."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import DataError
from ..hierarchy import LabelHierarchy


@dataclass
class PointCloudScene:
    positions: np.ndarray  # (N, 3) meters
    features: np.ndarray  # (N, F)
    fine_labels: np.ndarray  # (N,) leaf positions in the generating hierarchy
    labeled_mask: np.ndarray  # (N,) bool

    def __post_init__(self):
        n = len(self.positions)
        if n < 1:
            raise DataError("a scene needs at least one point")
        if self.positions.shape != (n, 3) or len(self.features) != n or len(self.fine_labels) != n:
            raise DataError("scene arrays disagree on the number of points")
        if self.labeled_mask.shape != (n,):
            raise DataError("labeled_mask must have one entry per point")

    @property
    def num_points(self) -> int:
        return len(self.positions)


def class_prototypes(
    h: LabelHierarchy,
    feature_dim: int,
    seed: int,
    level_scales: Sequence[float] | None = None,
) -> np.ndarray:
    """One prototype per leaf: the sum of random node offsets along its path.

    Offsets shrink toward the fine level, so siblings sit closer together
    than cousins.  Returns ``(|L_n|, feature_dim)``.
    """
    rng = np.random.default_rng(seed)
    if level_scales is None:
        level_scales = [3.0 * 0.5**i for i in range(h.num_levels)]
    if len(level_scales) != h.num_levels:
        raise DataError("need one prototype scale per level")
    offsets = []
    for i, size in enumerate(h.level_sizes):
        v = rng.normal(size=(size, feature_dim))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        offsets.append(level_scales[i] * v)
    table = h.path_table
    return sum(offsets[i][table[:, i]] for i in range(h.num_levels))


def _split_counts(total: int, weights: np.ndarray) -> np.ndarray:
    """Largest-remainder apportionment of ``total`` by ``weights``."""
    share = total * weights / weights.sum()
    counts = np.floor(share).astype(np.int64)
    rest = total - counts.sum()
    order = np.lexsort((np.arange(len(share)), -(share - counts)))
    counts[order[:rest]] += 1
    return counts


def default_blob_proportions(num_blobs: int, seed: int) -> np.ndarray:
    """Skewed blob sizes (log-normal), so some classes are rare."""
    rng = np.random.default_rng(seed)
    w = rng.lognormal(mean=0.0, sigma=0.8, size=num_blobs)
    return w / w.sum()


def generate_scene(
    h: LabelHierarchy,
    num_points: int = 10_000,
    num_blobs: int | None = None,
    noise: float = 1.0,
    seed: int = 0,
    *,
    feature_dim: int = 16,
    prototypes: np.ndarray | None = None,
    prototype_seed: int | None = None,
    proportions: Sequence[float] | None = None,
    class_weights: Sequence[float] | None = None,
    room: Sequence[float] = (10.0, 10.0, 3.0),
    position_leak: float = 0.1,
) -> PointCloudScene:
    """Axis-aligned box blobs, one fine label each.

    Blob ``b`` gets leaf ``b mod |L_n|`` after a seeded shuffle, so every
    class appears once ``num_blobs >= |L_n|``.  Blob sizes follow
    ``proportions`` (one weight per blob) if given; otherwise
    ``class_weights`` (one per leaf) split among that leaf's blobs with a
    seeded jitter; otherwise a log-normal spread.  Features are the class
    prototype plus Gaussian noise plus a position term; both perturbations
    scale with ``noise``, so ``noise=0`` returns the prototypes exactly.
    """
    m = h.level_sizes[-1]
    if num_blobs is None:
        num_blobs = m
    if num_blobs < 1 or num_points < 1:
        raise DataError("need at least one blob and one point")
    rng = np.random.default_rng(seed)
    if prototypes is None:
        prototypes = class_prototypes(h, feature_dim, seed if prototype_seed is None else prototype_seed)
    feature_dim = prototypes.shape[1]

    leaf_of_blob = np.resize(rng.permutation(m), num_blobs)
    if proportions is not None:
        weights = np.asarray(proportions, dtype=np.float64)
    elif class_weights is not None:
        cw = np.asarray(class_weights, dtype=np.float64)
        if cw.shape != (m,) or np.any(cw < 0):
            raise DataError("class_weights must be one non-negative weight per fine label")
        per_leaf = np.bincount(leaf_of_blob, minlength=m)
        jitter = np.random.default_rng(seed + 7919).uniform(0.5, 1.5, size=num_blobs)
        weights = cw[leaf_of_blob] * jitter
        # keep each class's total share; jitter only moves points between its blobs
        for leaf in range(m):
            sel = leaf_of_blob == leaf
            if per_leaf[leaf]:
                weights[sel] *= cw[leaf] / weights[sel].sum()
    else:
        weights = default_blob_proportions(num_blobs, seed + 7919)
    if weights.shape != (num_blobs,) or np.any(weights < 0) or weights.sum() <= 0:
        raise DataError("proportions must be one non-negative weight per blob")
    counts = _split_counts(num_points, weights)

    room = np.asarray(room, dtype=np.float64)
    positions, labels = [], []
    for b in range(num_blobs):
        extent = rng.uniform(0.5, 2.0, size=3) * np.array([1.0, 1.0, 0.5])
        lo = rng.uniform(0.0, 1.0, size=3) * np.maximum(room - extent, 0.0)
        positions.append(lo + rng.uniform(0.0, 1.0, size=(counts[b], 3)) * extent)
        labels.append(np.full(counts[b], leaf_of_blob[b], dtype=np.int64))
    pos = np.concatenate(positions)
    lab = np.concatenate(labels)

    gauss = rng.normal(size=(num_points, feature_dim))
    leak_dir = rng.normal(size=(3, feature_dim)) / np.sqrt(3.0)
    feats = prototypes[lab] + noise * gauss + noise * position_leak * ((pos / room - 0.5) @ leak_dir)
    return PointCloudScene(pos, feats, lab, np.zeros(num_points, dtype=bool))


def merge_scenes(scenes: Sequence[PointCloudScene], spacing: float = 1000.0) -> PointCloudScene:
    """Concatenate scenes into one pool, shifting each along x so voxels and
    FDS neighbourhoods never span two scenes."""
    pos = np.concatenate([s.positions + np.array([k * spacing, 0.0, 0.0]) for k, s in enumerate(scenes)])
    return PointCloudScene(
        pos,
        np.concatenate([s.features for s in scenes]),
        np.concatenate([s.fine_labels for s in scenes]),
        np.concatenate([s.labeled_mask for s in scenes]),
    )
