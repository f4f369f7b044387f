"""Budgeted, spatially diverse point selection.

Unlabeled points are bucketed into voxels at one or more scales, voxels are
ranked by their mean point score, and points are drawn voxel by voxel (at
most ``points_per_voxel`` each) while feature distance suppression (FDS)
drops candidates that duplicate a nearby, already chosen point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError, EmptyUnlabeledPool, ShapeMismatch

Cell = tuple[int, int, int]


@dataclass(frozen=True)
class SelectionConfig:
    budget_points: int = 1
    points_per_voxel: int = 1
    fds_threshold: float = 0.95
    fds_radius: float = 0.3
    voxel_sizes: tuple[float, ...] = (0.2, 0.4)
    # compare candidates against previously labeled points as well as this round's picks
    fds_against_labeled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "voxel_sizes", tuple(float(v) for v in self.voxel_sizes))
        if self.budget_points < 1:
            raise DataError("budget_points must be >= 1")
        if self.points_per_voxel < 1:
            raise DataError("points_per_voxel must be >= 1")
        if not self.voxel_sizes or any(not v > 0 for v in self.voxel_sizes):
            raise DataError("voxel_sizes must be a non-empty list of positive sizes")
        if not -1.0 <= self.fds_threshold <= 1.0:
            raise DataError("fds_threshold must lie in [-1, 1]")
        if self.fds_radius < 0:
            raise DataError("fds_radius must be non-negative")


def budget_from_fraction(fraction: float, total_points: int) -> int:
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"budget fraction {fraction} outside (0, 1]")
    return max(1, math.floor(fraction * total_points))


@dataclass(frozen=True)
class VoxelGrid:
    voxel_size: float
    ids: np.ndarray
    point_cells: np.ndarray  # (N, 3) integer cell per point
    cells: dict[Cell, tuple[int, ...]] = field(repr=False)


def voxelize(positions: np.ndarray, voxel_size: float, ids: Sequence[int] | None = None) -> VoxelGrid:
    """Assign each point to ``floor(coordinate / voxel_size)`` per axis."""
    if not voxel_size > 0:
        raise DataError("voxel_size must be positive")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    ids = np.arange(len(pos)) if ids is None else np.asarray(ids)
    if len(ids) != len(pos):
        raise ShapeMismatch("ids and positions differ in length")
    pc = np.floor(pos / voxel_size).astype(np.int64)
    cells: dict[Cell, list[int]] = {}
    for pid, c in zip(ids.tolist(), map(tuple, pc.tolist())):
        cells.setdefault(c, []).append(pid)
    return VoxelGrid(voxel_size, ids, pc, {k: tuple(v) for k, v in cells.items()})


def voxel_scores(grid: VoxelGrid, scores) -> dict[Cell, float]:
    """Mean score per cell.  ``scores`` maps point id -> score (dict or id-indexed array)."""
    out = {}
    for cell, members in grid.cells.items():
        out[cell] = float(np.mean([scores[m] for m in members]))
    return out


def rank_voxels(cell_scores: dict[Cell, float]) -> list[Cell]:
    """Cells by descending score; ties by ascending cell coordinate."""
    return sorted(cell_scores, key=lambda c: (-cell_scores[c], c))


@dataclass(frozen=True)
class SelectedPoint:
    id: int
    score: float
    cell: Cell
    scale: int


@dataclass(frozen=True)
class SelectionRound:
    round_index: int
    selected: tuple[SelectedPoint, ...]
    rejected_by_fds: tuple[int, ...]

    @property
    def selected_ids(self) -> list[int]:
        return [s.id for s in self.selected]

    def to_json(self) -> dict:
        return {
            "round": self.round_index,
            "selected": self.selected_ids,
            "rejected_by_fds": list(self.rejected_by_fds),
        }


@dataclass(frozen=True)
class CandidateOrder:
    """Candidates in visiting order with the voxel each one is charged to."""

    points: np.ndarray  # row indices into the scene
    rank: np.ndarray  # combined voxel rank per candidate
    scale: np.ndarray  # scale index the rank came from
    cells: np.ndarray  # (M, 3) cell at that scale


def candidate_order(
    positions: np.ndarray,
    scores: np.ndarray,
    voxel_sizes: Sequence[float],
    labeled: np.ndarray,
) -> CandidateOrder:
    """Order unlabeled points by best voxel rank over scales, then score, then id.

    At each scale voxels are ranked by mean unlabeled-point score (descending,
    ties by ascending cell).  A point inherits the minimum rank over scales;
    equal ranks from different scales resolve to the lower scale index.
    """
    cand = np.flatnonzero(~labeled)
    pos = positions[cand]
    sc = scores[cand]
    ranks = np.empty((len(voxel_sizes), len(cand)), dtype=np.int64)
    cells_at = []
    for s, size in enumerate(voxel_sizes):
        pc = np.floor(pos / size).astype(np.int64)
        uniq, inverse = np.unique(pc, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        means = np.bincount(inverse, weights=sc) / np.bincount(inverse)
        # np.unique sorts cells lexicographically, so a stable sort keeps cell order on ties
        order = np.argsort(-means, kind="stable")
        voxel_rank = np.empty_like(order)
        voxel_rank[order] = np.arange(len(order))
        ranks[s] = voxel_rank[inverse]
        cells_at.append(pc)
    best_scale = np.argmin(ranks, axis=0)
    best_rank = ranks[best_scale, np.arange(len(cand))]
    cells = np.stack(cells_at)[best_scale, np.arange(len(cand))]
    order = np.lexsort((cand, -sc, best_scale, best_rank))
    return CandidateOrder(cand[order], best_rank[order], best_scale[order], cells[order])


def _unit_rows(feats: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(norms > 0, feats / norms, 0.0)


def multi_scale_select(
    positions: np.ndarray,
    features: np.ndarray,
    scores: np.ndarray,
    config: SelectionConfig,
    labeled: np.ndarray | None = None,
    round_index: int = 0,
) -> SelectionRound:
    """Greedy selection over the combined multi-scale candidate order.

    ``scores`` is indexed by point row; entries of labeled points are ignored.
    Point ids in the result are row indices.
    """
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    feats = np.asarray(features, dtype=np.float64)
    n = len(pos)
    scores = np.asarray(scores, dtype=np.float64)
    labeled = np.zeros(n, dtype=bool) if labeled is None else np.asarray(labeled, dtype=bool)
    if feats.ndim != 2 or feats.shape[0] != n or scores.shape != (n,) or labeled.shape != (n,):
        raise ShapeMismatch("positions, features, scores and labeled mask must agree on N")
    if labeled.all():
        raise EmptyUnlabeledPool("every point is already labeled")
    if np.any(~np.isfinite(scores[~labeled])):
        raise DataError("scores must be finite for every unlabeled point")

    order = candidate_order(pos, scores, config.voxel_sizes, labeled)
    unit = _unit_rows(feats)
    radius2 = config.fds_radius**2

    ref = np.flatnonzero(labeled).tolist() if config.fds_against_labeled else []
    ref_pos = [pos[i] for i in ref]
    ref_unit = [unit[i] for i in ref]

    used: dict[tuple[int, Cell], int] = {}
    selected: list[SelectedPoint] = []
    rejected: list[int] = []
    for k in range(len(order.points)):
        if len(selected) >= config.budget_points:
            break
        pid = int(order.points[k])
        key = (int(order.scale[k]), tuple(int(c) for c in order.cells[k]))
        if used.get(key, 0) >= config.points_per_voxel:
            continue
        if ref_pos:
            d2 = ((np.asarray(ref_pos) - pos[pid]) ** 2).sum(axis=1)
            near = d2 <= radius2
            if near.any() and np.any(np.asarray(ref_unit)[near] @ unit[pid] > config.fds_threshold):
                rejected.append(pid)
                continue
        used[key] = used.get(key, 0) + 1
        selected.append(SelectedPoint(pid, float(scores[pid]), key[1], key[0]))
        ref_pos.append(pos[pid])
        ref_unit.append(unit[pid])
    return SelectionRound(round_index, tuple(selected), tuple(rejected))


def select_round(
    positions: np.ndarray,
    features: np.ndarray,
    scores: np.ndarray,
    config: SelectionConfig,
    labeled: np.ndarray | None = None,
    round_index: int = 0,
) -> SelectionRound:
    """Single-scale selection at ``config.voxel_sizes[0]``."""
    single = SelectionConfig(
        budget_points=config.budget_points,
        points_per_voxel=config.points_per_voxel,
        fds_threshold=config.fds_threshold,
        fds_radius=config.fds_radius,
        voxel_sizes=config.voxel_sizes[:1],
        fds_against_labeled=config.fds_against_labeled,
    )
    return multi_scale_select(positions, features, scores, single, labeled, round_index)
