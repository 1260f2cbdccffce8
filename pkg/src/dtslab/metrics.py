"""Per-class IoU / mIoU over a pixel confusion matrix, and the metrics CSV."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import FormatError, ShapeError

__all__ = ["ConfusionMatrix", "accumulate", "miou", "MetricsRow",
           "csv_header", "format_row", "MetricsWriter", "read_metrics_csv"]

_IGNORE = 255


class ConfusionMatrix:
    """C x C pixel counts; entry (i, j) = ground truth i predicted as j."""

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise ShapeError(f"ConfusionMatrix: need at least 1 class, got {num_classes}")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray,
               ignore: int = _IGNORE) -> ConfusionMatrix:
    """Tally one prediction/ground-truth pair; gt ignore pixels are skipped."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"accumulate: pred {pred.shape} vs gt {gt.shape}")
    c = cm.num_classes
    valid = gt != ignore
    p = pred[valid].astype(np.int64)
    g = gt[valid].astype(np.int64)
    if p.size and (p.min() < 0 or p.max() >= c):
        raise ShapeError(
            f"accumulate: prediction values must lie in [0,{c}) (predictions are total)")
    if g.size and (g.min() < 0 or g.max() >= c):
        raise ShapeError(f"accumulate: ground-truth values must lie in [0,{c}) or ignore")
    cm.counts += np.bincount(g * c + p, minlength=c * c).reshape(c, c)
    return cm


def miou(cm: ConfusionMatrix) -> tuple[list[float], float]:
    """Per-class IoU (NaN for classes absent from both maps) and their mean.

    Classes with zero ground truth and zero predictions are excluded from
    the mean; zero ground truth with nonzero predictions scores 0.
    """
    if cm.total == 0:
        raise ShapeError("miou: empty confusion matrix")
    diag = np.diag(cm.counts).astype(np.float64)
    gt_tot = cm.counts.sum(axis=1).astype(np.float64)
    pr_tot = cm.counts.sum(axis=0).astype(np.float64)
    union = gt_tot + pr_tot - diag
    present = union > 0
    iou = np.full(cm.num_classes, np.nan)
    iou[present] = diag[present] / union[present]
    return iou.tolist(), float(np.nanmean(iou[present]))


@dataclass
class MetricsRow:
    """One evaluation record in a run's history."""

    run_id: str
    iteration: int
    per_class_iou: list[float]
    miou: float
    loss_g1: float = math.nan
    loss_g2: float = math.nan
    gamma_g1: float = math.nan
    gamma_g2: float = math.nan
    prob: float = math.nan


def csv_header(num_classes: int) -> str:
    ious = ",".join(f"iou_{i}" for i in range(num_classes))
    return f"iter,miou,{ious},loss_g1,loss_g2,gamma_g1,gamma_g2,prob"


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


def format_row(row: MetricsRow) -> str:
    ious = ",".join(_fmt(v) for v in row.per_class_iou)
    return (f"{row.iteration},{_fmt(row.miou)},{ious},{_fmt(row.loss_g1)},"
            f"{_fmt(row.loss_g2)},{_fmt(row.gamma_g1)},{_fmt(row.gamma_g2)},"
            f"{_fmt(row.prob)}")


class MetricsWriter:
    """Append-only CSV sink; rows must arrive in increasing iteration order."""

    def __init__(self, path, num_classes: int):
        self.path = path
        self.num_classes = num_classes
        self._last_iter: Optional[int] = None
        with open(path, "w") as fh:
            fh.write(csv_header(num_classes) + "\n")

    def append(self, row: MetricsRow) -> None:
        if len(row.per_class_iou) != self.num_classes:
            raise ShapeError(
                f"MetricsWriter: row has {len(row.per_class_iou)} class IoUs, "
                f"expected {self.num_classes}")
        if self._last_iter is not None and row.iteration <= self._last_iter:
            raise ShapeError(
                f"MetricsWriter: iteration {row.iteration} not after {self._last_iter}")
        self._last_iter = row.iteration
        with open(self.path, "a") as fh:
            fh.write(format_row(row) + "\n")


def read_metrics_csv(path) -> tuple[list[str], list[list[float]]]:
    """Parse a metrics CSV back into (column names, numeric rows)."""
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("iter,"):
        raise FormatError(f"{path}: not a metrics CSV")
    cols = lines[0].split(",")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != len(cols):
            raise FormatError(f"{path}: row width {len(parts)} != header {len(cols)}")
        rows.append([float(p) for p in parts])
    return cols, rows
