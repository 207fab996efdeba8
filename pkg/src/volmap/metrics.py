"""Point-level confusion matrices, per-class IOU and inference timing."""
from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_info

from .geometry import IGNORE_LABEL, PointCloud
from .volmapnet import infer


@dataclass(eq=False)
class ConfusionMatrix:
    """Rows are ground truth, columns predictions.

    Points whose prediction is the ignore label (outside the grid) cannot be
    placed in a column; they are tallied in ``missed`` and count as false
    negatives of their true class.
    """

    n_classes: int
    counts: np.ndarray = field(default=None)
    missed: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.n_classes, self.n_classes), dtype=np.int64)
        if self.missed is None:
            self.missed = np.zeros(self.n_classes, dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum() + self.missed.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n_classes != self.n_classes:
            raise ValueError("class counts differ")
        return ConfusionMatrix(self.n_classes, self.counts + other.counts, self.missed + other.missed)

    def to_json(self) -> dict:
        return {"counts": self.counts.tolist(), "missed": self.missed.tolist()}


def accumulate(cm: ConfusionMatrix, gt: PointCloud, pred: PointCloud) -> ConfusionMatrix:
    """Add one frame to ``cm`` in place (and return it). Ignore-labelled ground truth is skipped."""
    if gt.label is None or pred.label is None:
        raise ValueError("both clouds need labels")
    if len(gt) != len(pred):
        raise ValueError(f"point counts differ: {len(gt)} vs {len(pred)}")
    g, p = gt.label.astype(np.int64), pred.label.astype(np.int64)
    keep = g != IGNORE_LABEL
    g, p = g[keep], p[keep]
    k = cm.n_classes
    if len(g) and g.max() >= k:
        raise ValueError("ground-truth label outside the matrix")
    placed = p != IGNORE_LABEL
    if placed.any() and p[placed].max() >= k:
        raise ValueError("predicted label outside the matrix")
    cm.counts += np.bincount(g[placed] * k + p[placed], minlength=k * k).reshape(k, k)
    cm.missed += np.bincount(g[~placed], minlength=k)
    return cm


def iou(cm: ConfusionMatrix) -> dict[int, float]:
    """TP / (TP + FP + FN) per class; classes never seen nor predicted are absent."""
    tp = np.diag(cm.counts)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp + cm.missed
    denom = tp + fp + fn
    return {c: float(tp[c] / denom[c]) for c in range(cm.n_classes) if denom[c] > 0}


def mean_iou(values: dict) -> float:
    return float(np.mean(list(values.values()))) if values else float("nan")


def _threads() -> int:
    info = threadpool_info()
    return max((d.get("num_threads", 1) for d in info), default=1)


def time_inference(cloud: PointCloud, params, grid_cfg, n_warmup: int = 2, n_runs: int = 10) -> dict:
    """Wall-clock milliseconds of :func:`volmapnet.infer` on an in-memory cloud."""
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    for _ in range(n_warmup):
        infer(cloud, params, grid_cfg)
    times = []
    for _ in range(n_runs):
        t0 = time.perf_counter()
        infer(cloud, params, grid_cfg)
        times.append((time.perf_counter() - t0) * 1e3)
    times = np.array(times)
    return {
        "mean_ms": float(times.mean()),
        "p50_ms": float(np.percentile(times, 50)),
        "p95_ms": float(np.percentile(times, 95)),
        "n_runs": int(n_runs),
        "n_warmup": int(n_warmup),
        "n_points": int(len(cloud)),
        "grid_shape": [grid_cfg.n_layers, *grid_cfg.shape],
        "blas_threads": _threads(),
        "cpu_count": os.cpu_count(),
    }


def evaluation_report(cm: ConfusionMatrix, class_names=None, timing=None) -> dict:
    values = iou(cm)
    name = (lambda c: class_names[c]) if class_names else str
    return {
        "iou": {name(c): v for c, v in values.items()},
        "mean_iou": mean_iou(values),
        "confusion_matrix": cm.to_json(),
        "evaluated_points": cm.total,
        "timing": timing,
    }
