"""Segmentation metrics and label-correction curves."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, UndefinedMetricError


def confusion(pred, gt, num_classes: int) -> np.ndarray:
    """Counts with rows = ground truth, columns = prediction."""
    pred = np.asarray(pred).astype(np.int64).reshape(-1)
    gt = np.asarray(gt).astype(np.int64).reshape(-1)
    if pred.shape != gt.shape:
        raise DataError(f"prediction and ground truth differ in size ({pred.size} vs {gt.size})")
    for name, a in (("prediction", pred), ("ground truth", gt)):
        if a.size and (a.min() < 0 or a.max() >= num_classes):
            raise DataError(f"{name} label out of range [0, {num_classes})")
    return np.bincount(gt * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def class_iou(conf: np.ndarray) -> np.ndarray:
    """Per-class IoU, NaN where the class is absent from both prediction and ground truth."""
    tp = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / np.maximum(union, 1), np.nan)


def miou(conf: np.ndarray) -> float:
    iou = class_iou(conf)
    if np.all(np.isnan(iou)):
        raise UndefinedMetricError("mIoU undefined: no class occurs in prediction or ground truth")
    return float(np.nanmean(iou))


def accuracies(conf: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-class accuracy (NaN when the class has no ground-truth pixels) and Acc_a."""
    total = conf.sum()
    if total == 0:
        raise UndefinedMetricError("accuracy undefined for zero pixels")
    support = conf.sum(axis=1)
    tp = np.diag(conf).astype(np.float64)
    acc_c = np.where(support > 0, tp / np.maximum(support, 1), np.nan)
    return acc_c, float(tp.sum() / total)


def default_r_grid(stop: float = 0.5, step: float = 0.01) -> np.ndarray:
    return np.round(np.arange(int(round(stop / step)) + 1) * step, 10)


@dataclass
class CorrectionCurve:
    r: np.ndarray
    acc: np.ndarray

    def write_csv(self, path, header=("r_area", "acc_a")):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r, a in zip(self.r, self.acc):
                w.writerow([f"{r:.10g}", repr(float(a))])


def correction_curve(pred, gt, uncertainty, r_grid=None) -> CorrectionCurve:
    """Acc_a after replacing the ``floor(r * N)`` most uncertain pixels with ground truth.

    Pixels are ranked by descending uncertainty, ties in raster order
    (image-major when several images are passed).
    """
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    unc = np.asarray(uncertainty, dtype=np.float64).reshape(-1)
    if not (pred.shape == gt.shape == unc.shape):
        raise DataError("prediction, ground truth and uncertainty must have the same number of pixels")
    r_grid = default_r_grid() if r_grid is None else np.asarray(r_grid, dtype=np.float64)
    if np.any(r_grid < 0) or np.any(r_grid > 1):
        raise DataError("r values must lie in [0, 1]")
    N = pred.size
    order = np.argsort(-unc, kind="stable")
    wrong = pred != gt
    fixed = np.concatenate([[0], np.cumsum(wrong[order])])
    correct = N - int(wrong.sum())
    # the 1e-9 guard keeps e.g. 0.29 * 100 from flooring to 28
    m = np.floor(r_grid * N + 1e-9).astype(np.int64)
    return CorrectionCurve(r_grid.copy(), (correct + fixed[m]) / N)


def oracle_curve(pred, gt, r_grid=None) -> CorrectionCurve:
    """Correction curve for a ranking that lists every wrong pixel first."""
    wrong = (np.asarray(pred) != np.asarray(gt)).astype(np.float64)
    return correction_curve(pred, gt, wrong, r_grid)


def oracle_curve_analytic(base_acc: float, r_grid=None) -> CorrectionCurve:
    """Continuous oracle: Acc_a(r) = min(base + r, 1)."""
    r_grid = default_r_grid() if r_grid is None else np.asarray(r_grid, dtype=np.float64)
    return CorrectionCurve(r_grid.copy(), np.minimum(base_acc + r_grid, 1.0))


def auc(curve: CorrectionCurve, stop: float = 0.5) -> float:
    """Trapezoid area over r in [0, stop], divided by ``stop``."""
    r, a = np.asarray(curve.r, dtype=np.float64), np.asarray(curve.acc, dtype=np.float64)
    if r.size < 2 or r[0] > 1e-12 or r[-1] < stop - 1e-12 or np.any(np.diff(r) <= 0):
        raise DataError(f"curve must be strictly increasing and cover [0, {stop}]")
    keep = r <= stop + 1e-12
    return float(np.trapezoid(a[keep], r[keep]) / stop)


def summarize(pred, gt, num_classes: int) -> dict:
    conf = confusion(pred, gt, num_classes)
    acc_c, acc_a = accuracies(conf)
    try:
        m = miou(conf)
    except UndefinedMetricError:
        m = math.nan
    return {"confusion": conf, "miou": m, "acc_c": acc_c, "acc_a": acc_a}


def write_matrix_csv(path, matrix, class_names, fmt="{:d}"):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([""] + list(class_names))
        for name, row in zip(class_names, matrix):
            w.writerow([name] + [fmt.format(v) for v in row])
