"""Per-level linear softmax heads trained as a mean-teacher pair."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError, Divergence
from ..hierarchy import LabelHierarchy


@dataclass
class LinearHeads:
    W: list[np.ndarray]  # (|L_i|, F)
    b: list[np.ndarray]  # (|L_i|,)

    def copy(self) -> "LinearHeads":
        return LinearHeads([w.copy() for w in self.W], [v.copy() for v in self.b])

    def arrays(self) -> list[np.ndarray]:
        return self.W + self.b


@dataclass
class ToyClassifier:
    hierarchy: LabelHierarchy
    student: LinearHeads
    teacher: LinearHeads
    ema_rate: float = 0.955
    pseudo_threshold: float = 0.75
    last_pseudo_count: int = field(default=0, compare=False)
    # per-dimension standardization, fitted on the first scene trained on
    input_mean: np.ndarray | None = None
    input_scale: np.ndarray | None = None

    @classmethod
    def create(
        cls,
        h: LabelHierarchy,
        feature_dim: int,
        seed: int = 0,
        init_scale: float = 0.0,
        ema_rate: float = 0.955,
        pseudo_threshold: float = 0.75,
    ) -> "ToyClassifier":
        rng = np.random.default_rng(seed)
        heads = LinearHeads(
            [init_scale * rng.normal(size=(s, feature_dim)) for s in h.level_sizes],
            [np.zeros(s) for s in h.level_sizes],
        )
        return cls(h, heads, heads.copy(), ema_rate, pseudo_threshold)

    @property
    def feature_dim(self) -> int:
        return self.student.W[0].shape[1]

    def fit_inputs(self, features: np.ndarray) -> None:
        x = np.asarray(features, dtype=np.float64)
        self.input_mean = x.mean(axis=0)
        sd = x.std(axis=0)
        self.input_scale = np.where(sd > 0, sd, 1.0)

    def prepare(self, features: np.ndarray) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.feature_dim:
            raise DataError(f"expected (N, {self.feature_dim}) features, got {x.shape}")
        if self.input_mean is None:
            return x
        return (x - self.input_mean) / self.input_scale


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _level_probs(heads: LinearHeads, x: np.ndarray) -> list[np.ndarray]:
    return [_softmax(x @ W.T + b) for W, b in zip(heads.W, heads.b)]


def predict_levels(clf: ToyClassifier, features: np.ndarray, use_teacher: bool = True) -> list[np.ndarray]:
    """Per-level softmax, one ``(N, |L_i|)`` array per level."""
    heads = clf.teacher if use_teacher else clf.student
    return _level_probs(heads, clf.prepare(features))


def path_posterior(clf: ToyClassifier, features: np.ndarray, use_teacher: bool = True) -> np.ndarray:
    """Fine-level distribution proportional to the product of each leaf's path probabilities.

    Coarse heads see many more examples per class than the fine head early
    on, so chaining them into the fine decision is what lets the tree help
    prediction and not only scoring.
    """
    probs = predict_levels(clf, features, use_teacher)
    table = clf.hierarchy.path_table
    logp = np.zeros((len(probs[0]), table.shape[0]))
    for i, p in enumerate(probs):
        logp += np.log(np.clip(p, 1e-300, 1.0))[:, table[:, i]]
    return _softmax(logp)


def level_targets(h: LabelHierarchy, fine: np.ndarray) -> list[np.ndarray]:
    """Derive every level's label from the fine label through the leaf paths."""
    return [h.fine_to_level(i)[fine] for i in range(h.num_levels)]


def train_step(
    clf: ToyClassifier,
    features: np.ndarray,
    fine_labels: np.ndarray,
    labeled_ids: np.ndarray,
    steps: int = 500,
    lr: float = 0.5,
    seed: int = 0,
    *,
    pseudo_batch: int = 1024,
    pseudo_weight: float = 1.0,
    weight_decay: float = 1e-4,
) -> ToyClassifier:
    """Gradient descent on labeled cross-entropy (all levels) plus a pseudo-label term.

    Each step draws ``pseudo_batch`` unlabeled points; those whose teacher
    fine-level confidence is strictly above ``pseudo_threshold`` contribute
    the teacher's argmax (and its ancestors) as targets.  The teacher is
    then moved toward the student by EMA.  On the first call the input
    standardization is fitted on ``features`` (labeled and unlabeled alike).
    Updates ``clf`` in place and returns it.
    """
    if clf.input_mean is None:
        clf.fit_inputs(features)
    x = clf.prepare(features)
    labeled_ids = np.asarray(labeled_ids, dtype=np.int64)
    if labeled_ids.size < 1:
        raise DataError("training needs at least one labeled point")
    h = clf.hierarchy
    rng = np.random.default_rng(seed)
    unlabeled = np.setdiff1d(np.arange(len(x)), labeled_ids)
    xl = x[labeled_ids]
    yl = level_targets(h, np.asarray(fine_labels)[labeled_ids])
    r = clf.ema_rate
    pseudo_total = 0

    for step in range(steps):
        xs, ys, ws = [xl], [yl], [np.full(len(xl), 1.0 / len(xl))]
        if unlabeled.size and pseudo_weight > 0:
            batch = unlabeled[rng.integers(0, unlabeled.size, size=min(pseudo_batch, unlabeled.size))]
            xb = x[batch]
            tp = _softmax(xb @ clf.teacher.W[-1].T + clf.teacher.b[-1])
            keep = tp.max(axis=1) > clf.pseudo_threshold
            k = int(keep.sum())
            pseudo_total += k
            if k:
                xs.append(xb[keep])
                ys.append(level_targets(h, tp[keep].argmax(axis=1)))
                ws.append(np.full(k, pseudo_weight / len(batch)))
        xa = np.concatenate(xs)
        wa = np.concatenate(ws)
        loss = 0.0
        for i in range(h.num_levels):
            W, b = clf.student.W[i], clf.student.b[i]
            ya = np.concatenate([y[i] for y in ys])
            p = _softmax(xa @ W.T + b)
            loss += -np.sum(wa * np.log(p[np.arange(len(ya)), ya] + 1e-300))
            g = p
            g[np.arange(len(ya)), ya] -= 1.0
            g *= wa[:, None]
            W -= lr * (g.T @ xa + weight_decay * W)
            b -= lr * g.sum(axis=0)
        if not np.isfinite(loss):
            raise Divergence(f"non-finite loss at step {step}", step)
        for t, s in zip(clf.teacher.arrays(), clf.student.arrays()):
            t *= r
            t += (1.0 - r) * s
    clf.last_pseudo_count = pseudo_total
    return clf
