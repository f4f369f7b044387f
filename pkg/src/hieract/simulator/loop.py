"""Round orchestration: train, predict, score, select, label, repeat."""

from __future__ import annotations

import dataclasses
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from ..errors import DataError
from ..hierarchy import LabelHierarchy, builtin_hierarchy, load_hierarchy
from ..selection import SelectionConfig, budget_from_fraction, multi_scale_select
from ..uncertainty import entropy_uncertainty, global_profile, label_uncertainty, propagate_batch
from .classifier import ToyClassifier, path_posterior, predict_levels, train_step
from .metrics import compute_miou
from .scene import PointCloudScene, class_prototypes, generate_scene, merge_scenes

log = logging.getLogger(__name__)

ACQUISITIONS = ("hierarchical", "random", "flat-entropy", "flat-margin")
SCENE_SPACING = 1000.0

# Rough point shares of the 13 indoor classes (ceiling ... clutter): a few
# structural classes dominate and several objects are rare.
S3DIS_LIKE_CLASS_WEIGHTS = (0.19, 0.16, 0.27, 0.01, 0.02, 0.03, 0.05, 0.04, 0.04, 0.005, 0.08, 0.015, 0.09)


# The synthetic rooms hold ~10k points in 10 x 10 x 3 m, i.e. ~0.3 m spacing
# against a few cm in real scans.  Voxel and FDS scales are stretched by the
# same factor so a voxel still aggregates a neighbourhood rather than one point.
BENCHMARK_OVERRIDES: dict[str, Any] = {"voxel_sizes": [1.5, 3.0], "fds_radius": 2.0}


class BudgetExhaustedEarly(UserWarning):
    """Fewer admissible candidates than the round budget."""


@dataclass
class RunConfig:
    rounds: int = 5
    budget_fraction: float = 0.0002
    omega: float | list[float] = 0.1
    seed: int = 1
    acquisition: str = "hierarchical"
    # ablation switches
    llhc: bool = True
    lup: bool = True
    rup: bool = True
    gaui: bool = True
    hierarchy: str = "s3dis"
    alt_hierarchy: str = "s3dis_alt"
    profile_scope: str = "dataset"
    # selection
    points_per_voxel: int = 1
    fds_threshold: float = 0.95
    fds_radius: float = 0.3
    voxel_sizes: list[float] = field(default_factory=lambda: [0.2, 0.4])
    # synthetic data
    num_scenes: int = 5
    points_per_scene: int = 10_000
    num_blobs: int = 26
    noise: float = 0.3
    class_skew: bool = True
    feature_dim: int = 16
    # toy model
    steps: int = 500
    lr: float = 0.5
    ema_rate: float = 0.955
    pseudo_threshold: float = 0.75
    pseudo_batch: int = 1024
    weight_decay: float = 1e-4
    decode: str = "path"
    run_id: str = ""

    def __post_init__(self):
        if self.rounds < 1:
            raise DataError("rounds must be >= 1")
        if not 0.0 < self.budget_fraction <= 1.0:
            raise DataError("budget_fraction must lie in (0, 1]")
        if self.acquisition not in ACQUISITIONS:
            raise DataError(f"acquisition must be one of {', '.join(ACQUISITIONS)}")
        if self.profile_scope not in ("dataset", "scene"):
            raise DataError("profile_scope must be 'dataset' or 'scene'")
        if self.decode not in ("path", "flat"):
            raise DataError("decode must be 'path' or 'flat'")
        self.voxel_sizes = [float(v) for v in self.voxel_sizes]
        self.selection()  # validates the selection fields

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise DataError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def selection(self, budget_points: int = 1) -> SelectionConfig:
        return SelectionConfig(
            budget_points=budget_points,
            points_per_voxel=self.points_per_voxel,
            fds_threshold=self.fds_threshold,
            fds_radius=self.fds_radius,
            voxel_sizes=tuple(self.voxel_sizes),
        )

    def label(self) -> str:
        if self.run_id:
            return self.run_id
        if self.acquisition != "hierarchical":
            return self.acquisition
        off = [n for n in ("llhc", "lup", "rup", "gaui") if not getattr(self, n)]
        return "full" if not off else "no-" + "-".join(off)


def benchmark_config(seed: int, **overrides: Any) -> RunConfig:
    """The standard synthetic benchmark cell for ``seed``; ``overrides`` pick the variant."""
    return RunConfig(seed=seed, **{**BENCHMARK_OVERRIDES, **overrides})


@dataclass
class RoundRecord:
    round: int
    miou: float
    per_class_iou: list[float | None]
    selected: int
    labeled_total: int
    pseudo_labels: int
    rejected_by_fds: int
    selected_ids: list[int]


@dataclass
class RunReport:
    run_id: str
    seed: int
    config: dict[str, Any]
    class_names: list[str]
    rounds: list[RoundRecord]
    wall_clock: float = 0.0

    @property
    def final_miou(self) -> float:
        return self.rounds[-1].miou

    def to_json(self) -> dict[str, Any]:
        """Deterministic content; wall-clock time is deliberately left out."""
        return {
            "run_id": self.run_id,
            "seed": self.seed,
            "config": self.config,
            "class_names": self.class_names,
            "final_miou": self.final_miou,
            "rounds": [dataclasses.asdict(r) for r in self.rounds],
        }


def resolve_hierarchy(ref: str | LabelHierarchy) -> LabelHierarchy:
    """Accept a hierarchy object, a bundled fixture name or a file path."""
    if isinstance(ref, LabelHierarchy):
        return ref
    if Path(ref).suffix == ".json" or "/" in ref:
        return load_hierarchy(ref)
    return builtin_hierarchy(ref)


def benchmark_scenes(h: LabelHierarchy, config: RunConfig) -> list[PointCloudScene]:
    """The synthetic scene set for ``config.seed``; shared by every acquisition."""
    protos = class_prototypes(h, config.feature_dim, seed=10_000 + config.seed)
    weights = None
    if config.class_skew and h.level_sizes[-1] == len(S3DIS_LIKE_CLASS_WEIGHTS):
        weights = S3DIS_LIKE_CLASS_WEIGHTS
    return [
        generate_scene(
            h,
            config.points_per_scene,
            config.num_blobs,
            config.noise,
            seed=1000 * config.seed + k,
            prototypes=protos,
            class_weights=weights,
        )
        for k in range(config.num_scenes)
    ]


def _remap_labels(source: LabelHierarchy, target: LabelHierarchy, fine: np.ndarray) -> np.ndarray:
    src = source.level_names(source.num_levels - 1)
    dst = target.level_names(target.num_levels - 1)
    if sorted(src) != sorted(dst):
        raise DataError("alternative hierarchy must have the same fine labels")
    lookup = np.array([dst.index(name) for name in src])
    return lookup[fine]


def acquisition_scores(
    h: LabelHierarchy,
    probs: list[np.ndarray],
    config: RunConfig,
    candidates: np.ndarray,
    groups: np.ndarray | None = None,
) -> np.ndarray:
    """Scores for the ``candidates`` rows; higher means more worth labelling."""
    rows = [p[candidates] for p in probs]
    if config.acquisition == "flat-entropy":
        p = np.clip(rows[-1], 1e-300, 1.0)
        return -(p * np.log(p)).sum(axis=1)
    if config.acquisition == "flat-margin":
        top = np.sort(rows[-1], axis=1)
        return 1.0 - (top[:, -1] - top[:, -2])
    ufn = label_uncertainty if config.lup else entropy_uncertainty
    u, _ = propagate_batch(h, rows, config.omega, ufn, recursive=config.rup)
    if not config.gaui:
        return np.abs(u).sum(axis=1)
    if config.profile_scope == "dataset" or groups is None:
        return u @ global_profile(u).mean_vector
    out = np.empty(len(candidates))
    g = groups[candidates]
    for k in np.unique(g):
        sel = g == k
        out[sel] = u[sel] @ global_profile(u[sel]).mean_vector
    return out


def run_active_learning(
    config: RunConfig,
    scenes: Sequence[PointCloudScene] | None = None,
    scene_hierarchy: LabelHierarchy | None = None,
    classifier: ToyClassifier | None = None,
) -> RunReport:
    """One full active-learning run.

    ``scenes`` default to :func:`benchmark_scenes`; their fine labels index
    the leaves of ``scene_hierarchy`` (default: ``config.hierarchy``).  With
    ``llhc`` off, training and scoring use ``config.alt_hierarchy`` instead.
    ``classifier`` (bound to the hierarchy in use) is trained further in
    place; without one, a fresh model is created and, as long as nothing is
    labeled, the first round's picks are uniform random.
    """
    t0 = time.perf_counter()
    base = resolve_hierarchy(scene_hierarchy or config.hierarchy)
    h = base if config.llhc else resolve_hierarchy(config.alt_hierarchy)
    if scenes is None:
        scenes = benchmark_scenes(base, config)
    pool = merge_scenes(scenes, SCENE_SPACING)
    groups = np.concatenate([np.full(s.num_points, k) for k, s in enumerate(scenes)])
    truth = _remap_labels(base, h, pool.fine_labels) if h is not base else pool.fine_labels
    n = pool.num_points
    m = h.level_sizes[-1]
    labeled = pool.labeled_mask.copy()
    budget = budget_from_fraction(config.budget_fraction, n)
    sel_cfg = config.selection(budget)
    rng = np.random.default_rng(config.seed)

    cold = classifier is None
    clf = classifier or ToyClassifier.create(h, pool.features.shape[1], seed=config.seed,
                                             ema_rate=config.ema_rate,
                                             pseudo_threshold=config.pseudo_threshold)
    if clf.hierarchy != h or clf.feature_dim != pool.features.shape[1]:
        raise DataError("classifier does not match the hierarchy or feature width")
    records = []
    for r in range(1, config.rounds + 1):
        unl = np.flatnonzero(~labeled)
        if unl.size == 0:
            warnings.warn(f"round {r}: no unlabeled points left", BudgetExhaustedEarly)
            break
        rejected = 0
        if (cold and r == 1 and not labeled.any()) or config.acquisition == "random":
            picked = np.sort(rng.choice(unl, size=min(budget, unl.size), replace=False)).tolist()
        else:
            probs = predict_levels(clf, pool.features, use_teacher=True)
            scores = np.zeros(n)
            scores[unl] = acquisition_scores(h, probs, config, unl, groups)
            result = multi_scale_select(pool.positions, pool.features, scores, sel_cfg, labeled, r)
            picked = result.selected_ids
            rejected = len(result.rejected_by_fds)
        if len(picked) < budget:
            warnings.warn(f"round {r}: selected {len(picked)} of {budget}", BudgetExhaustedEarly)
        labeled[picked] = True

        train_step(clf, pool.features, truth, np.flatnonzero(labeled), config.steps, config.lr,
                   seed=config.seed * 100 + r, pseudo_batch=config.pseudo_batch,
                   weight_decay=config.weight_decay)
        if config.decode == "path":
            pred = path_posterior(clf, pool.features).argmax(axis=1)
        else:
            pred = predict_levels(clf, pool.features, use_teacher=True)[-1].argmax(axis=1)
        miou, per_class = compute_miou(pred, truth, m)
        records.append(RoundRecord(
            round=r,
            miou=miou,
            per_class_iou=[None if np.isnan(v) else float(v) for v in per_class],
            selected=len(picked),
            labeled_total=int(labeled.sum()),
            pseudo_labels=clf.last_pseudo_count,
            rejected_by_fds=rejected,
            selected_ids=[int(i) for i in picked],
        ))
        log.info("%s seed %d round %d: mIoU %.4f", config.label(), config.seed, r, miou)

    return RunReport(
        run_id=config.label(),
        seed=config.seed,
        config=config.to_dict(),
        class_names=h.level_names(h.num_levels - 1),
        rounds=records,
        wall_clock=time.perf_counter() - t0,
    )
