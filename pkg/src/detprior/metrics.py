"""Evaluation metrics for normals, depth, segmentation, and intrinsics.

Angular error is kept in radians internally; the CLI converts to degrees for
display. Depth REL and the ratio accuracy are computed on the values as given
(optionally after per-map normalization), while the depth RMSE is always taken
on separately normalized relative depth.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .taskio import SegPalette, normalize_depth

DELTA_RATIO_THRESHOLD = 1.25


@dataclass
class MetricReport:
    """Per-task evaluation summary over a set of images."""

    task: str
    per_metric: dict[str, float]
    sample_count: int
    per_category: dict[int, dict[str, float]] | None = None

    def validate(self) -> "MetricReport":
        bounded = {"delta", "acc", "miou", "mean_acc", "mean_miou"}
        for name, value in self.per_metric.items():
            if not math.isfinite(value):
                raise ValueError(f"metric {name} is not finite")
            if value < 0 or (name in bounded and value > 1):
                raise ValueError(f"metric {name}={value} outside its valid range")
        return self

    def to_json(self) -> str:
        doc = {
            "task": self.task,
            "sample_count": self.sample_count,
            "metrics": self.per_metric,
        }
        if self.per_category is not None:
            doc["per_category"] = {str(k): v for k, v in self.per_category.items()}
        return json.dumps(doc, indent=2, sort_keys=True)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def _check_shape(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")


def normal_metrics(pred: np.ndarray, gt: np.ndarray, unit_tol: float = 0.02) -> tuple[float, float]:
    """(L1, Ang): mean absolute componentwise difference and mean angle in radians."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_shape(pred, gt)
    for name, arr in (("pred", pred), ("gt", gt)):
        norms = np.linalg.norm(arr, axis=-1)
        if np.abs(norms - 1.0).max() > unit_tol:
            raise ValueError(f"{name} normals are not unit length (tolerance {unit_tol})")
    l1 = float(np.mean(np.abs(pred - gt)))
    cos = np.clip(np.sum(pred * gt, axis=-1), -1.0, 1.0)
    ang = float(np.mean(np.arccos(cos)))
    return l1, ang


@dataclass
class DepthMetrics:
    rel: float
    delta: float
    rmse_rel: float
    excluded_pixels: int = 0


def depth_metrics(pred: np.ndarray, gt: np.ndarray, normalize_first: bool = False) -> DepthMetrics:
    """REL and ratio accuracy on the given values, RMSE on relative depth.

    Pixels with non-positive ground truth are excluded from REL and the ratio
    accuracy (their count is reported); the RMSE normalizes both maps
    separately to [0, 1] first.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_shape(pred, gt)
    pred_n = normalize_depth(pred)
    gt_n = normalize_depth(gt)
    rmse_rel = float(np.sqrt(np.mean((pred_n - gt_n) ** 2)))
    if normalize_first:
        pred, gt = pred_n, gt_n
    valid = gt > 0
    excluded = int(valid.size - valid.sum())
    if valid.sum() == 0:
        raise ValueError("no strictly positive ground-truth depth pixels")
    p, g = pred[valid], gt[valid]
    rel = float(np.mean(np.abs(g - p) / g))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(g / p, p / g)
    ratio = np.where(p > 0, ratio, np.inf)
    delta = float(np.mean(ratio < DELTA_RATIO_THRESHOLD))
    return DepthMetrics(rel=rel, delta=delta, rmse_rel=rmse_rel, excluded_pixels=excluded)


@dataclass
class SegScores:
    per_category: dict[int, dict[str, float]]
    mean_acc: float
    mean_miou: float


def seg_metrics(pred: np.ndarray, gt: np.ndarray, palette: SegPalette) -> SegScores:
    """Per-category accuracy and IoU; categories absent from both maps are skipped."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    _check_shape(pred, gt)
    known = set(palette.ids)
    seen = set(int(x) for x in np.unique(pred)) | set(int(x) for x in np.unique(gt))
    if seen - known:
        raise ValueError(f"ids {sorted(seen - known)} not in palette")
    per_category: dict[int, dict[str, float]] = {}
    for cid in palette.ids:
        in_pred, in_gt = pred == cid, gt == cid
        union = int(np.sum(in_pred | in_gt))
        if union == 0:
            continue
        inter = int(np.sum(in_pred & in_gt))
        gt_count = int(np.sum(in_gt))
        acc = inter / gt_count if gt_count else 0.0
        per_category[cid] = {"acc": acc, "miou": inter / union}
    accs = [v["acc"] for v in per_category.values()]
    ious = [v["miou"] for v in per_category.values()]
    return SegScores(
        per_category=per_category,
        mean_acc=float(np.mean(accs)),
        mean_miou=float(np.mean(ious)),
    )


def mse(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean squared difference over all elements."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_shape(pred, gt)
    return float(np.mean((pred - gt) ** 2))


def write_flat_table(rows: list[dict[str, float | int | str]], path: str | Path) -> None:
    """Write metric rows as a CSV table for spreadsheets."""
    if not rows:
        raise ValueError("no rows to write")
    keys: list[str] = []
    for row in rows:
        for k in row:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)
