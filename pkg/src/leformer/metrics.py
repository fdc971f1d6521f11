"""Confusion-matrix segmentation metrics: OA, per-class precision/recall/F1/IoU, mIoU."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

IGNORE_INDEX = 255


class MetricsError(ValueError):
    pass


class ConfusionMatrix:
    """``counts[t, p]`` = number of pixels with true class t predicted as p (int64)."""

    def __init__(self, num_classes: int = 2, ignore_index: int = IGNORE_INDEX):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred, target) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        target = np.asarray(target)
        if pred.shape != target.shape:
            raise MetricsError(f"prediction shape {pred.shape} != target shape {target.shape}")
        keep = target != self.ignore_index
        t = target[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        k = self.num_classes
        if t.size and (t.min() < 0 or t.max() >= k or p.min() < 0 or p.max() >= k):
            raise MetricsError(f"class ids outside [0, {k})")
        self.counts += np.bincount(t * k + p, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes, self.ignore_index)
        out.counts = self.counts + other.counts
        return out

    __add__ = merge

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class SegMetrics:
    oa: float
    precision: tuple
    recall: tuple
    f1: tuple
    iou: tuple
    mean_f1: float
    miou: float

    @property
    def f1_lake(self) -> float:
        return self.f1[1] if len(self.f1) > 1 else self.f1[0]

    def as_record(self, name: str = "") -> dict:
        return {"name": name, "oa": f"{self.oa:.6f}", "f1_lake": f"{self.f1_lake:.6f}",
                "f1_mean": f"{self.mean_f1:.6f}", "miou": f"{self.miou:.6f}"}

    def format_table(self) -> str:
        lines = [f"{'class':>5}  {'precision':>9}  {'recall':>9}  {'F1':>9}  {'IoU':>9}"]
        for c in range(len(self.iou)):
            lines.append(f"{c:>5}  {self.precision[c]:>9.4f}  {self.recall[c]:>9.4f}  {self.f1[c]:>9.4f}  {self.iou[c]:>9.4f}")
        lines.append(f"OA {self.oa:.4f}   F1(lake) {self.f1_lake:.4f}   mean F1 {self.mean_f1:.4f}   mIoU {self.miou:.4f}")
        return "\n".join(lines)


def _ratio(num: int, den: int) -> Fraction:
    # absent from both prediction and target counts as perfect
    return Fraction(1) if den == 0 else Fraction(num, den)


def compute_metrics(cm: ConfusionMatrix) -> SegMetrics:
    counts = cm.counts
    total = int(counts.sum())
    if total == 0:
        raise MetricsError("confusion matrix is empty")
    k = cm.num_classes
    tp = [int(counts[c, c]) for c in range(k)]
    fp = [int(counts[:, c].sum()) - tp[c] for c in range(k)]
    fn = [int(counts[c, :].sum()) - tp[c] for c in range(k)]
    precision = [_ratio(tp[c], tp[c] + fp[c]) if tp[c] + fp[c] or fn[c] == 0 else Fraction(0) for c in range(k)]
    recall = [_ratio(tp[c], tp[c] + fn[c]) if tp[c] + fn[c] or fp[c] == 0 else Fraction(0) for c in range(k)]
    f1 = [_ratio(2 * tp[c], 2 * tp[c] + fp[c] + fn[c]) for c in range(k)]
    iou = [_ratio(tp[c], tp[c] + fp[c] + fn[c]) for c in range(k)]
    # exact rationals until here; a single rounding per reported value
    return SegMetrics(
        oa=float(Fraction(sum(tp), total)),
        precision=tuple(map(float, precision)),
        recall=tuple(map(float, recall)),
        f1=tuple(map(float, f1)),
        iou=tuple(map(float, iou)),
        mean_f1=float(sum(f1, Fraction(0)) / k),
        miou=float(sum(iou, Fraction(0)) / k),
    )
