"""Segmentation metrics: confusion matrix, IoU, correlation."""

import numpy as np

from .errors import DataError, ShapeError, UndefinedMetricError


class ConfusionMatrix:
    """Accumulates a (true, predicted) count matrix over label maps."""

    def __init__(self, num_classes: int):
        if num_classes < 2:
            raise ShapeError(f"need at least 2 classes, got {num_classes}")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, truth: np.ndarray) -> None:
        pred = np.asarray(pred)
        truth = np.asarray(truth)
        if truth.shape != pred.shape:
            raise ShapeError(f"shapes differ: {truth.shape} vs {pred.shape}")
        t = truth.reshape(-1).astype(np.int64)
        p = pred.reshape(-1).astype(np.int64)
        c = self.num_classes
        if t.size and (t.min() < 0 or t.max() >= c):
            raise DataError(f"true labels outside [0, {c})")
        if p.size and (p.min() < 0 or p.max() >= c):
            raise DataError(f"predicted labels outside [0, {c})")
        self.counts += np.bincount(c * t + p, minlength=c * c).reshape(c, c)

    def merge(self, other: "ConfusionMatrix") -> None:
        if other.num_classes != self.num_classes:
            raise ShapeError("class counts differ")
        self.counts += other.counts

    def per_class_iou(self) -> np.ndarray:
        """IoU per class; classes with empty union come back as NaN."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=1) + self.counts.sum(axis=0) - np.diag(self.counts)
        out = np.full(self.num_classes, np.nan)
        present = union > 0
        out[present] = tp[present] / union[present]
        return out

    def miou(self) -> float:
        """Mean IoU over classes with non-empty union."""
        iou = self.per_class_iou()
        valid = ~np.isnan(iou)
        if not valid.any():
            raise UndefinedMetricError("every class has an empty union")
        return float(iou[valid].mean())


def miou(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> float:
    cm = ConfusionMatrix(num_classes)
    cm.update(pred, truth)
    return cm.miou()


def pixel_accuracy(pred: np.ndarray, truth: np.ndarray) -> float:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape or pred.size == 0:
        raise ShapeError("label maps must be non-empty and equal-shaped")
    return float((pred == truth).mean())


def pearson(x, y) -> float:
    """Sample Pearson correlation; undefined for length < 2 or zero variance."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise ShapeError(f"lengths differ: {x.size} vs {y.size}")
    if x.size < 2:
        raise UndefinedMetricError("correlation needs at least 2 points")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(np.sqrt((xc * xc).sum()))
    sy = float(np.sqrt((yc * yc).sum()))
    if sx == 0 or sy == 0:
        raise UndefinedMetricError("correlation undefined for zero variance")
    return float((xc * yc).sum() / (sx * sy))
