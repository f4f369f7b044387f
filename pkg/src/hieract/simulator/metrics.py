"""Segmentation metrics."""

from __future__ import annotations

import numpy as np

from ..errors import LengthMismatch


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    idx = num_classes * truth.astype(np.int64) + pred.astype(np.int64)
    return np.bincount(idx, minlength=num_classes**2).reshape(num_classes, num_classes)


def compute_miou(pred, truth, num_classes: int | None = None) -> tuple[float, np.ndarray]:
    """Mean IoU over classes present in truth or predictions.

    Returns ``(miou, per_class)``; classes absent from both get NaN in
    ``per_class`` and are left out of the mean.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise LengthMismatch(f"{pred.size} predictions for {truth.size} labels")
    if num_classes is None:
        num_classes = int(max(pred.max(initial=-1), truth.max(initial=-1))) + 1
    cm = confusion_matrix(pred, truth, num_classes)
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    present = union > 0
    miou = float(iou[present].mean()) if present.any() else 0.0
    return miou, iou
