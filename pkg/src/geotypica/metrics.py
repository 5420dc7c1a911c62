"""Binary segmentation metrics over a confusion matrix.

Evaluation is one positive class against the rest (building-vs-rest for the
standard reports). Matrices are mergeable monoids: per-tile counts sum to
the full-image counts in any order. Degenerate denominators return 0.0 with
the ``degenerate`` flag set on the returned value rather than raising.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["MetricValue", "ConfusionMatrix", "accumulate",
           "iou", "oa", "precision", "recall", "f1"]


class MetricValue(float):
    """A float that remembers whether its denominator was degenerate."""

    degenerate: bool

    def __new__(cls, value: float, degenerate: bool = False):
        obj = super().__new__(cls, value)
        obj.degenerate = degenerate
        return obj


@dataclass
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)

    def report(self) -> dict:
        metrics = {"iou": iou(self), "oa": oa(self), "precision": precision(self),
                   "recall": recall(self), "f1": f1(self)}
        return {
            **{k: float(v) for k, v in metrics.items()},
            "degenerate": sorted(k for k, v in metrics.items() if v.degenerate),
            "pixels": self.total,
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
        }


def accumulate(cm: ConfusionMatrix, pred_mask: np.ndarray, gt_mask: np.ndarray,
               positive_class_id: int) -> ConfusionMatrix:
    """Add pixelwise counts for one mask pair (positive class vs rest)."""
    pred_mask = np.asarray(pred_mask)
    gt_mask = np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}")
    p = pred_mask == positive_class_id
    g = gt_mask == positive_class_id
    cm.tp += int(np.count_nonzero(p & g))
    cm.fp += int(np.count_nonzero(p & ~g))
    cm.fn += int(np.count_nonzero(~p & g))
    cm.tn += int(np.count_nonzero(~p & ~g))
    return cm


def _ratio(num: float, den: float) -> MetricValue:
    if den == 0:
        return MetricValue(0.0, degenerate=True)
    return MetricValue(num / den)


def iou(cm: ConfusionMatrix) -> MetricValue:
    return _ratio(cm.tp, cm.tp + cm.fp + cm.fn)


def oa(cm: ConfusionMatrix) -> MetricValue:
    return _ratio(cm.tp + cm.tn, cm.total)


def precision(cm: ConfusionMatrix) -> MetricValue:
    return _ratio(cm.tp, cm.tp + cm.fp)


def recall(cm: ConfusionMatrix) -> MetricValue:
    return _ratio(cm.tp, cm.tp + cm.fn)


def f1(cm: ConfusionMatrix) -> MetricValue:
    p = precision(cm)
    r = recall(cm)
    if p.degenerate or r.degenerate or (p + r) == 0:
        return MetricValue(0.0, degenerate=True)
    return MetricValue(2.0 * p * r / (p + r))
