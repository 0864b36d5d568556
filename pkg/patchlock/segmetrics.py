"""Pixel-level segmentation metrics.

Per-class intersection over union, ``IoU = TP / (TP + FP + FN)``, and its
mean over classes. Counts are accumulated image by image in a
:class:`ConfusionCounts`; pixels labelled ``IGNORE_LABEL`` in the ground
truth contribute to no class. Classes that never occur in either the
prediction or the ground truth are left out of the mean.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from .core import LabelError, ShapeError

IGNORE_LABEL = 255


class ConfusionCounts:
    """Streaming per-class TP / FP / FN counters.

    Not safe to share between threads; give each worker its own instance
    and combine them with :meth:`merge`.

    Example:
        >>> cc = ConfusionCounts(3)
        >>> cc.accumulate(np.array([0, 1, 1, 2]), np.array([0, 1, 2, 2]))
        >>> cc.miou().miou
        0.6666666666666666
    """

    def __init__(self, num_classes: int) -> None:
        if num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {num_classes}")
        self.num_classes = num_classes
        self.tp = np.zeros(num_classes, dtype=np.int64)
        self.fp = np.zeros(num_classes, dtype=np.int64)
        self.fn = np.zeros(num_classes, dtype=np.int64)

    def _check_labels(self, labels: np.ndarray, name: str, allow_ignore: bool) -> None:
        bad = (labels < 0) | (labels >= self.num_classes)
        if allow_ignore:
            bad &= labels != IGNORE_LABEL
        if np.any(bad):
            value = int(labels[bad][0])
            raise LabelError(
                f"{name} label {value} outside [0, {self.num_classes}) and not {IGNORE_LABEL}"
            )

    def accumulate(self, pred, gt) -> None:
        """Add one prediction / ground-truth pair.

        Args:
            pred: Predicted labels
            gt: Ground-truth labels, same shape; ``IGNORE_LABEL`` pixels are skipped

        Raises:
            ShapeError: If the shapes differ
            LabelError: If a label is out of range
        """
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"Prediction shape {pred.shape} differs from ground truth {gt.shape}")
        pred = pred.astype(np.int64).ravel()
        gt = gt.astype(np.int64).ravel()
        self._check_labels(pred, "Predicted", allow_ignore=True)
        self._check_labels(gt, "Ground-truth", allow_ignore=True)

        keep = gt != IGNORE_LABEL
        pred, gt = pred[keep], gt[keep]
        if np.any(pred == IGNORE_LABEL):
            raise LabelError(f"Prediction uses the ignore label {IGNORE_LABEL} on a labelled pixel")

        c = self.num_classes
        hit = pred == gt
        self.tp += np.bincount(gt[hit], minlength=c)
        self.fp += np.bincount(pred[~hit], minlength=c)
        self.fn += np.bincount(gt[~hit], minlength=c)

    def merge(self, other: "ConfusionCounts") -> "ConfusionCounts":
        """Add another accumulator's counts into this one and return self."""
        if other.num_classes != self.num_classes:
            raise ShapeError(
                f"Cannot merge counts for {other.num_classes} classes into {self.num_classes}"
            )
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self

    def pixel_accuracy(self) -> Optional[float]:
        """Fraction of labelled pixels predicted correctly, None when empty."""
        total = int(self.tp.sum() + self.fn.sum())
        if total == 0:
            return None
        return float(self.tp.sum()) / total

    def miou(self) -> "IoUResult":
        return miou(self)


@dataclass(frozen=True)
class IoUResult:
    """Per-class IoU (NaN for absent classes) and their mean (None when all absent)."""

    per_class: np.ndarray
    miou: Optional[float]

    def present_classes(self) -> List[int]:
        return [int(k) for k in np.nonzero(~np.isnan(self.per_class))[0]]


def accumulate(cc: ConfusionCounts, pred, gt) -> ConfusionCounts:
    """Functional form of :meth:`ConfusionCounts.accumulate`; returns ``cc``."""
    cc.accumulate(pred, gt)
    return cc


def miou(cc: ConfusionCounts) -> IoUResult:
    """Compute per-class IoU and mIoU from accumulated counts."""
    union = cc.tp + cc.fp + cc.fn
    present = union > 0
    per_class = np.full(cc.num_classes, np.nan)
    per_class[present] = cc.tp[present] / union[present]
    mean = float(per_class[present].mean()) if np.any(present) else None
    return IoUResult(per_class, mean)


def format_table(cc: ConfusionCounts, class_names: Optional[List[str]] = None) -> str:
    """Render a line-oriented text table of per-class counts and IoU."""
    result = cc.miou()
    names = class_names or [str(k) for k in range(cc.num_classes)]
    lines = [f"{'class':<12}{'tp':>10}{'fp':>10}{'fn':>10}{'IoU':>10}"]
    for k in range(cc.num_classes):
        iou = result.per_class[k]
        iou_text = "-" if np.isnan(iou) else f"{iou:.4f}"
        lines.append(
            f"{names[k]:<12}{cc.tp[k]:>10d}{cc.fp[k]:>10d}{cc.fn[k]:>10d}{iou_text:>10}"
        )
    miou_text = "undefined" if result.miou is None else f"{result.miou:.4f}"
    lines.append(f"{'mIoU':<42}{miou_text:>10}")
    return "\n".join(lines)


def to_key_values(cc: ConfusionCounts) -> Dict[str, str]:
    """Machine-readable report: ``iou.<k>`` per present class, ``miou``, ``pixel_accuracy``."""
    result = cc.miou()
    values: Dict[str, str] = {}
    for k in range(cc.num_classes):
        iou = result.per_class[k]
        values[f"iou.{k}"] = "nan" if np.isnan(iou) else repr(float(iou))
    values["miou"] = "nan" if result.miou is None else repr(result.miou)
    accuracy = cc.pixel_accuracy()
    values["pixel_accuracy"] = "nan" if accuracy is None else repr(accuracy)
    return values
