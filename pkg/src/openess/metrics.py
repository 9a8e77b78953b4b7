"""Confusion-matrix segmentation metrics: per-class IoU, mIoU and pixel accuracy."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .labelmap import IGNORE


class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        self.counts = (np.zeros((num_classes, num_classes), dtype=np.int64)
                       if counts is None else np.asarray(counts, dtype=np.int64).copy())

    def accumulate(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(pred).ravel().astype(np.int64)
        gt = np.asarray(gt).ravel().astype(np.int64)
        if pred.shape != gt.shape:
            raise ValueError("prediction and ground truth differ in shape")
        keep = (gt != IGNORE) & (pred != IGNORE)
        pred, gt = pred[keep], gt[keep]
        z = self.num_classes
        if gt.size and (gt.max() >= z or pred.max() >= z):
            raise ValueError(f"class id >= {z}")
        self.counts += np.bincount(gt * z + pred, minlength=z * z).reshape(z, z)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray) -> ConfusionMatrix:
    return ConfusionMatrix(cm.num_classes, cm.counts).accumulate(pred, gt)


@dataclass
class IoUReport:
    iou: np.ndarray  # per class, nan where excluded
    miou: float
    acc: float
    exact_iou: list  # Fraction or None per class

    def summary(self) -> dict[str, float]:
        return {"miou": self.miou, "acc": self.acc}


def iou_scores(cm: ConfusionMatrix, strict: bool = False) -> IoUReport:
    """IoU_z = TP / (TP + FP + FN).

    Classes with an empty union are left out of the mean, or scored 0 when
    ``strict`` is set.
    """
    counts = cm.counts
    total = int(counts.sum())
    if total == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - tp
    exact = [Fraction(int(t), int(u)) if u else None for t, u in zip(tp, union)]
    scored = [f if f is not None else (Fraction(0) if strict else None) for f in exact]
    kept = [f for f in scored if f is not None]
    miou = float(sum(kept) / len(kept)) if kept else float("nan")
    iou = np.array([float(f) if f is not None else np.nan for f in scored])
    return IoUReport(iou, miou, float(Fraction(int(tp.sum()), total)), exact)


def format_report(report: IoUReport, names: Sequence[str] | None = None) -> str:
    """CSV ``class,iou`` rows followed by a ``miou,acc`` summary."""
    names = names or [str(i) for i in range(len(report.iou))]
    lines = ["class,iou"]
    for name, v in zip(names, report.iou):
        lines.append(f"{name},{'' if np.isnan(v) else repr(float(v))}")
    lines.append("miou,acc")
    lines.append(f"{report.miou!r},{report.acc!r}")
    return "\n".join(lines) + "\n"


def key_values(report: IoUReport, prefix: str = "") -> str:
    return f"{prefix}miou={report.miou!r}\n{prefix}acc={report.acc!r}\n"
