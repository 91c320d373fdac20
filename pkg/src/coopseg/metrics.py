"""Segmentation and grading metrics: confusion-matrix mIoU, top-k and binary accuracy."""

from __future__ import annotations

import numpy as np


class UndefinedMetricError(ValueError):
    pass


class ConfusionMatrix:
    """K x K counts, rows = ground truth, columns = prediction."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None else counts

    def update(self, truth, pred) -> "ConfusionMatrix":
        truth = np.asarray(truth).ravel().astype(np.int64)
        pred = np.asarray(pred).ravel().astype(np.int64)
        if truth.shape != pred.shape:
            raise ValueError(f"truth {truth.shape} and prediction {pred.shape} differ")
        k = self.num_classes
        if truth.size and (truth.min() < 0 or truth.max() >= k or pred.min() < 0 or pred.max() >= k):
            raise ValueError(f"class ids must lie in [0, {k})")
        self.counts += np.bincount(truth * k + pred, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou_per_class(self) -> np.ndarray:
        """IoU per class, NaN where the class is absent from both truth and prediction."""
        tp = np.diag(self.counts).astype(np.float64)
        denom = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)

    def miou(self, exclude_background: bool = False) -> float:
        return miou(self, exclude_background)


def miou(cm: ConfusionMatrix, exclude_background: bool = False) -> float:
    """Mean IoU over classes with a non-zero denominator."""
    if cm.total < 1:
        raise UndefinedMetricError("confusion matrix is empty")
    iou = cm.iou_per_class()
    if exclude_background:
        iou = iou[1:]
    present = iou[~np.isnan(iou)]
    if present.size == 0:
        raise UndefinedMetricError("no class present in truth or prediction")
    return float(present.mean())


def topk_accuracy(logits, labels, k: int) -> float:
    """Fraction of rows whose label ranks in the top k; ties rank lower class ids first."""
    logits = np.asarray(logits).reshape(len(labels), -1)
    labels = np.asarray(labels)
    if k > logits.shape[1]:
        raise ValueError(f"k={k} exceeds {logits.shape[1]} classes")
    true_score = np.take_along_axis(logits, labels[:, None], axis=1)
    cls = np.arange(logits.shape[1])[None]
    # classes that outrank the true label
    ahead = (logits > true_score) | ((logits == true_score) & (cls < labels[:, None]))
    return float(np.mean(ahead.sum(axis=1) < k))


def binarize_grades(grades) -> np.ndarray:
    """0 stays normal, every grade >= 1 becomes abnormal."""
    return (np.asarray(grades) >= 1).astype(np.int64)


def binary_accuracy(pred, truth) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth lengths differ")
    return float(np.mean(binarize_grades(pred) == binarize_grades(truth)))
