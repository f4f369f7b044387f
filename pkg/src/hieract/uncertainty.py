"""Label-wise uncertainty, coarse-to-fine propagation and global-aware scoring.

Everything here works on float64 arrays.  The batched entry points take one
``(N, |L_i|)`` probability array per level; the single-point wrappers exist
for clarity in tests and small tools.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, EmptyPopulation, ShapeMismatch
from .hierarchy import LabelHierarchy

NORMALIZATION_TOL = 1e-6
PROB_SLACK = 1e-9

Omega = float | Sequence[float]
UncertaintyFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class MultiLevelDistribution:
    per_level: tuple[np.ndarray, ...]

    @property
    def num_levels(self) -> int:
        return len(self.per_level)


@dataclass(frozen=True)
class PropagatedUncertainty:
    per_path: np.ndarray
    per_level_raw: tuple[np.ndarray, ...]
    omega: float | tuple[float, ...]


@dataclass(frozen=True)
class GlobalProfile:
    mean_vector: np.ndarray
    population: int


@dataclass(frozen=True)
class SceneScores:
    """Scores of the unlabeled points of one pool, in input order."""

    indices: np.ndarray
    scores: np.ndarray
    uncertainty: np.ndarray
    profile: GlobalProfile


def _check_probs(p: np.ndarray) -> np.ndarray:
    if np.any(p < -PROB_SLACK) or np.any(p > 1.0 + PROB_SLACK) or np.any(np.isnan(p)):
        raise DomainError("probabilities must lie in [0, 1]")
    return np.clip(p, 0.0, 1.0)


def label_uncertainty(p):
    """Ambiguity of a single label probability: 1 at p = 0.5, 0 at p in {0, 1}."""
    arr = _check_probs(np.asarray(p, dtype=np.float64))
    u = 1.0 - 2.0 * np.abs(arr - 0.5)
    return float(u) if u.ndim == 0 else u


def entropy_uncertainty(p):
    """Per-label Shannon term ``-p ln p`` (0 at p = 0).

    Summed over a level it gives the level's entropy; the simulator uses it
    as the drop-in replacement when label-wise projection is switched off.
    """
    arr = _check_probs(np.asarray(p, dtype=np.float64))
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(arr > 0.0, -arr * np.log(arr), 0.0)
    return float(u) if u.ndim == 0 else u


def make_distribution(h: LabelHierarchy, per_level: Sequence) -> MultiLevelDistribution:
    """Bind probability vectors to ``h``, renormalizing float noise up to 1e-6."""
    levels = normalize_levels(h, [np.asarray(v, dtype=np.float64)[None, :] for v in per_level])
    return MultiLevelDistribution(tuple(v[0] for v in levels))


def normalize_levels(h: LabelHierarchy, per_level: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Validate ``(N, |L_i|)`` arrays against ``h`` and renormalize each row."""
    if len(per_level) != h.num_levels:
        raise ShapeMismatch(f"expected {h.num_levels} levels, got {len(per_level)}")
    out = []
    n_points = None
    for i, (p, size) in enumerate(zip(per_level, h.level_sizes)):
        p = np.asarray(p, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != size:
            raise ShapeMismatch(f"level {i}: expected width {size}, got shape {p.shape}")
        if n_points is None:
            n_points = p.shape[0]
        elif p.shape[0] != n_points:
            raise ShapeMismatch(f"level {i}: {p.shape[0]} rows, expected {n_points}")
        p = _check_probs(p)
        total = p.sum(axis=1)
        if np.any(np.abs(total - 1.0) > NORMALIZATION_TOL):
            bad = int(np.argmax(np.abs(total - 1.0)))
            raise DomainError(f"level {i}: row {bad} sums to {total[bad]!r}, not 1")
        out.append(p / total[:, None])
    return out


def omega_schedule(omega: Omega, num_levels: int) -> tuple[float, ...]:
    """Expand ``omega`` into one decay factor per transition (levels 1..n)."""
    if np.ndim(omega) == 0:
        w = (float(omega),) * (num_levels - 1)
    else:
        w = tuple(float(x) for x in omega)
        if len(w) != num_levels - 1:
            raise ShapeMismatch(f"per-layer omega needs {num_levels - 1} values, got {len(w)}")
    if any(not np.isfinite(x) or x < 0 for x in w):
        raise DomainError("omega must be finite and non-negative")
    return w


def propagate_raw(h: LabelHierarchy, raw: Sequence[np.ndarray], omega: Omega) -> np.ndarray:
    """Run the coarse-to-fine recurrence on raw per-label uncertainties.

    ``raw[i]`` has shape ``(N, |L_i|)``.  Returns ``(N, |L_n|)`` propagated
    values in leaf order.  A parent whose children all have zero
    uncertainty hands its term to them in equal shares.
    """
    weights = omega_schedule(omega, h.num_levels)
    acc = raw[0]
    for i in range(1, h.num_levels):
        u = raw[i]
        parent = h.parent_positions(i)
        n_parent = h.level_sizes[i - 1]
        sib_sum = np.zeros((u.shape[0], n_parent))
        for j, pj in enumerate(parent):
            sib_sum[:, pj] += u[:, j]
        n_sib = np.bincount(parent, minlength=n_parent).astype(np.float64)
        denom = sib_sum[:, parent]
        with np.errstate(divide="ignore", invalid="ignore"):
            share = np.where(denom > 0.0, u / denom, 1.0 / n_sib[parent])
        acc = u + weights[i - 1] * acc[:, parent] * share
    return acc


def propagate_batch(
    h: LabelHierarchy,
    per_level: Sequence[np.ndarray],
    omega: Omega = 0.1,
    uncertainty_fn: UncertaintyFn = label_uncertainty,
    recursive: bool = True,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Propagated leaf-path uncertainty for N points at once.

    With ``recursive=False`` the leaf-level raw values are returned as is.
    """
    levels = normalize_levels(h, per_level)
    raw = [np.asarray(uncertainty_fn(p), dtype=np.float64) for p in levels]
    if not recursive:
        return raw[-1].copy(), raw
    return propagate_raw(h, raw, omega), raw


def propagate(
    h: LabelHierarchy,
    d: MultiLevelDistribution,
    omega: Omega = 0.1,
    uncertainty_fn: UncertaintyFn = label_uncertainty,
) -> PropagatedUncertainty:
    per_path, raw = propagate_batch(h, [v[None, :] for v in d.per_level], omega, uncertainty_fn)
    w = float(omega) if np.ndim(omega) == 0 else tuple(float(x) for x in omega)
    return PropagatedUncertainty(per_path[0], tuple(r[0] for r in raw), w)


def _as_matrix(points) -> np.ndarray:
    if isinstance(points, np.ndarray):
        m = np.asarray(points, dtype=np.float64)
    else:
        rows = [p.per_path if isinstance(p, PropagatedUncertainty) else p for p in points]
        if not rows:
            raise EmptyPopulation("global profile needs at least one unlabeled point")
        widths = {np.shape(r) for r in rows}
        if len(widths) != 1:
            raise ShapeMismatch(f"uncertainty vectors differ in shape: {sorted(widths)}")
        m = np.asarray(rows, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D stack of vectors, got shape {m.shape}")
    if m.shape[0] == 0:
        raise EmptyPopulation("global profile needs at least one unlabeled point")
    return m


def global_profile(points) -> GlobalProfile:
    """Mean propagated-uncertainty vector over the unlabeled population."""
    m = _as_matrix(points)
    return GlobalProfile(m.mean(axis=0), m.shape[0])


def score(point, g: GlobalProfile) -> float:
    u = point.per_path if isinstance(point, PropagatedUncertainty) else np.asarray(point, np.float64)
    if u.shape != g.mean_vector.shape:
        raise ShapeMismatch(f"uncertainty vector {u.shape} vs profile {g.mean_vector.shape}")
    return float(np.dot(g.mean_vector, u))


def score_scene(
    h: LabelHierarchy,
    per_level: Sequence[np.ndarray],
    omega: Omega = 0.1,
    labeled: np.ndarray | None = None,
    *,
    uncertainty_fn: UncertaintyFn = label_uncertainty,
    recursive: bool = True,
    global_aware: bool = True,
    profile: GlobalProfile | None = None,
) -> SceneScores:
    """Score every unlabeled point of a pool.

    ``per_level`` holds ``(N, |L_i|)`` arrays for all N points; ``labeled``
    masks points excluded from both the profile and the output.  Pass
    ``profile`` to score against a population computed elsewhere (e.g. the
    whole dataset rather than this scene).  ``global_aware=False`` replaces
    the profile inner product with the L1 norm of the uncertainty vector.
    """
    n = np.shape(per_level[0])[0]
    if labeled is None:
        idx = np.arange(n)
    else:
        labeled = np.asarray(labeled, dtype=bool)
        if labeled.shape != (n,):
            raise ShapeMismatch(f"labeled mask has shape {labeled.shape}, expected ({n},)")
        idx = np.flatnonzero(~labeled)
    if idx.size == 0:
        raise EmptyPopulation("no unlabeled points to score")
    rows = [np.asarray(p, dtype=np.float64)[idx] for p in per_level]
    u, _ = propagate_batch(h, rows, omega, uncertainty_fn, recursive)
    if profile is None:
        profile = global_profile(u)
    elif profile.mean_vector.shape != (u.shape[1],):
        raise ShapeMismatch("profile width does not match the leaf level")
    if global_aware:
        s = u @ profile.mean_vector
    else:
        s = np.abs(u).sum(axis=1)
    return SceneScores(idx, s, u, profile)
