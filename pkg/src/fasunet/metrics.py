"""Per-class DSC, precision and symmetric surface distance, with averaging
over the foreground classes 1..c-1."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


class SurfaceDistanceError(ValueError):
    """Raised when a class has no boundary pixels on one side."""


def _pair(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def dsc(pred, gt, class_id: int) -> float:
    pred, gt = _pair(pred, gt)
    s, y = pred == class_id, gt == class_id
    denom = int(s.sum()) + int(y.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((s & y).sum()) / denom


def precision(pred, gt, class_id: int) -> float:
    pred, gt = _pair(pred, gt)
    s, y = pred == class_id, gt == class_id
    tp = int((s & y).sum())
    fp = int((s & ~y).sum())
    if tp + fp == 0:
        return 1.0 if not y.any() else 0.0
    return tp / (tp + fp)


def boundary(mask, class_id: int) -> np.ndarray:
    """Class pixels with a 4-neighbour outside the class; the image border counts as outside."""
    sel = np.pad(np.asarray(mask) == class_id, 1, constant_values=False)
    core = sel[1:-1, 1:-1]
    interior = sel[:-2, 1:-1] & sel[2:, 1:-1] & sel[1:-1, :-2] & sel[1:-1, 2:]
    return core & ~interior


def ssd(pred, gt, class_id: int, spacing: float = 1.0) -> float:
    pred, gt = _pair(pred, gt)
    bs = np.argwhere(boundary(pred, class_id)).astype(np.float64) * spacing
    by = np.argwhere(boundary(gt, class_id)).astype(np.float64) * spacing
    if len(bs) == 0 or len(by) == 0:
        raise SurfaceDistanceError(f"class {class_id} has an empty boundary in "
                                   f"{'prediction' if len(bs) == 0 else 'ground truth'}")
    d_sy, _ = cKDTree(by).query(bs)
    d_ys, _ = cKDTree(bs).query(by)
    return float((d_sy.sum() + d_ys.sum()) / (len(bs) + len(by)))


@dataclass
class MetricsReport:
    classes: list[int]
    dsc: dict[int, float]
    precision: dict[int, float]
    ssd: dict[int, float]
    a_dsc: float
    a_preci: float
    a_ssd: float
    spacing: float = 1.0
    ssd_errors: dict[int, str] = field(default_factory=dict)

    def rows(self):
        for k in self.classes:
            yield k, self.dsc[k], self.precision[k], self.ssd.get(k, math.nan)


def evaluate(pred, gt, c: int, spacing: float = 1.0) -> MetricsReport:
    pred, gt = _pair(pred, gt)
    if c < 2:
        raise ValueError("need at least two classes (background + one foreground)")
    classes = list(range(1, c))
    d = {k: dsc(pred, gt, k) for k in classes}
    pr = {k: precision(pred, gt, k) for k in classes}
    sd, errs = {}, {}
    for k in classes:
        try:
            sd[k] = ssd(pred, gt, k, spacing)
        except SurfaceDistanceError as e:
            errs[k] = str(e)
    a_ssd = float(np.mean(list(sd.values()))) if sd else math.nan
    return MetricsReport(classes, d, pr, sd, float(np.mean(list(d.values()))),
                         float(np.mean(list(pr.values()))), a_ssd, spacing, errs)
