"""Confusion counting and IoU / mIoU for semantic occupancy grids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidInputError
from .scene import SemanticTaxonomy, VoxelGrid


@dataclass(frozen=True, eq=False)
class ConfusionCounts:
    """Per-class TP/FP/FN plus the pooled occupied-vs-empty counts."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    occ_tp: int
    occ_fp: int
    occ_fn: int
    empty_gt: int
    total: int

    def to_dict(self) -> dict:
        return {
            "tp": self.tp.tolist(),
            "fp": self.fp.tolist(),
            "fn": self.fn.tolist(),
            "occ_tp": self.occ_tp,
            "occ_fp": self.occ_fp,
            "occ_fn": self.occ_fn,
            "empty_gt": self.empty_gt,
            "total": self.total,
        }


def confusion(pred: VoxelGrid, gt: VoxelGrid, taxonomy: SemanticTaxonomy) -> ConfusionCounts:
    if pred.spec != gt.spec:
        raise InvalidInputError("prediction and ground truth grids have different specs")
    d = taxonomy.d
    pred.check_classes(d)
    gt.check_classes(d)
    p = pred.classes.ravel()
    g = gt.classes.ravel()
    cm = np.bincount(g * d + p, minlength=d * d).reshape(d, d)  # rows: gt, cols: pred
    tp = np.diag(cm).copy()
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    c0 = taxonomy.empty_class
    occ_p = p != c0
    occ_g = g != c0
    return ConfusionCounts(
        tp=tp,
        fp=fp,
        fn=fn,
        occ_tp=int(np.sum(occ_p & occ_g)),
        occ_fp=int(np.sum(occ_p & ~occ_g)),
        occ_fn=int(np.sum(~occ_p & occ_g)),
        empty_gt=int(np.sum(~occ_g)),
        total=int(g.size),
    )


def per_class_iou(counts: ConfusionCounts, classes) -> np.ndarray:
    """IoU per listed class; NaN where the denominator is zero."""
    classes = np.asarray(classes, dtype=np.int64)
    tp = counts.tp[classes].astype(np.float64)
    denom = tp + counts.fp[classes] + counts.fn[classes]
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / np.where(denom > 0, denom, 1), np.nan)


def mean_iou(counts: ConfusionCounts, classes) -> float:
    ious = per_class_iou(counts, classes)
    valid = ious[~np.isnan(ious)]
    return float(valid.mean()) if valid.size else float("nan")


def iou_miou(counts: ConfusionCounts, taxonomy: SemanticTaxonomy):
    """Occupancy IoU (non-empty classes pooled) and mIoU over non-empty classes.

    Classes that appear in neither prediction nor ground truth are left out
    of the mean. Returns ``(iou, miou, per_class)`` with ``per_class``
    indexed by the taxonomy's non-empty classes.
    """
    denom = counts.occ_tp + counts.occ_fp + counts.occ_fn
    iou = counts.occ_tp / denom if denom else float("nan")
    classes = taxonomy.nonempty_classes
    per_class = per_class_iou(counts, classes)
    return float(iou), mean_iou(counts, classes), per_class
