"""Segmentation metrics from per-class confusion tallies."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @property
    def n_classes(self) -> int:
        return len(self.tp)

    @property
    def total_pixels(self) -> int:
        return int(self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0])

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


@dataclass(frozen=True)
class BinaryMetrics:
    dice: float
    iou: float
    precision: float
    recall: float
    accuracy: float

    def as_dict(self) -> dict[str, float]:
        return dict(vars(self))


@dataclass(frozen=True)
class SemanticMetrics:
    mean_iou: float
    pixel_acc: float
    mean_acc: float
    fw_iou: float

    def as_dict(self) -> dict[str, float]:
        return dict(vars(self))


BINARY_KEYS = ("dice", "iou", "precision", "recall", "accuracy")
SEMANTIC_KEYS = ("mean_iou", "pixel_acc", "mean_acc", "fw_iou")


def confusion_from_masks(pred, gt, n_classes: int) -> ConfusionCounts:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    p = pred.astype(np.int64).ravel()
    g = gt.astype(np.int64).ravel()
    for name, a in (("pred", p), ("gt", g)):
        if a.size and (a.min() < 0 or a.max() >= n_classes):
            raise ValueError(f"{name} holds class indices outside [0, {n_classes})")
    cm = np.bincount(g * n_classes + p, minlength=n_classes * n_classes).reshape(n_classes, n_classes)
    tp = np.diag(cm).copy()
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = p.size - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


def _ratio(num: float, den: float, empty: float) -> float:
    return float(num) / float(den) if den else empty


def binary_metrics(c: ConfusionCounts, positive: int = 1) -> BinaryMetrics:
    """Foreground-vs-background metrics for class ``positive``.

    An empty prediction on an empty ground truth scores dice = iou = 1;
    precision (recall) is 0 when nothing is predicted (present).
    """
    tp, fp, fn, tn = (int(a[positive]) for a in (c.tp, c.fp, c.fn, c.tn))
    return BinaryMetrics(
        dice=_ratio(2 * tp, 2 * tp + fp + fn, 1.0),
        iou=_ratio(tp, tp + fp + fn, 1.0),
        precision=_ratio(tp, tp + fp, 0.0),
        recall=_ratio(tp, tp + fn, 0.0),
        accuracy=_ratio(tp + tn, tp + tn + fp + fn, 1.0),
    )


def semantic_metrics(c: ConfusionCounts) -> SemanticMetrics:
    """Class-averaged metrics; averages run over classes present in the ground truth."""
    if c.n_classes < 2:
        raise ValueError("semantic metrics need at least two classes")
    tp, fp, fn = (a.astype(np.float64) for a in (c.tp, c.fp, c.fn))
    gt_count = tp + fn
    total = float(c.total_pixels)
    present = gt_count > 0
    union = tp + fp + fn
    iou = np.divide(tp, union, out=np.zeros_like(tp), where=union > 0)
    recall = np.divide(tp, gt_count, out=np.zeros_like(tp), where=present)
    n_present = int(present.sum())
    freq = gt_count / total if total else np.zeros_like(tp)
    return SemanticMetrics(
        mean_iou=float(iou[present].sum() / n_present) if n_present else 1.0,
        pixel_acc=float(tp.sum() / total) if total else 1.0,
        mean_acc=float(recall[present].sum() / n_present) if n_present else 1.0,
        fw_iou=float((freq * iou).sum()),
    )


def metrics_from_masks(pred, gt, n_classes: int) -> dict[str, float]:
    """Binary metrics when ``n_classes == 2``, semantic metrics otherwise."""
    counts = confusion_from_masks(pred, gt, n_classes)
    if n_classes == 2:
        return binary_metrics(counts).as_dict()
    return semantic_metrics(counts).as_dict()


def aggregate_folds(per_fold: list[dict[str, float]]) -> dict[str, tuple[float, float]]:
    """Mean and population std of every metric across folds."""
    if not per_fold:
        raise ValueError("no fold records to aggregate")
    keys = list(per_fold[0])
    out = {}
    for k in keys:
        vals = np.array([rec[k] for rec in per_fold], dtype=np.float64)
        out[k] = (float(vals.mean()), float(vals.std()))
    return out


def format_mean_std(mean: float, std: float) -> str:
    """Percentages to one decimal, e.g. ``80.5 ± 2.5``."""
    return f"{100 * mean:.1f} ± {100 * std:.1f}"
