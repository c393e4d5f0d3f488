"""Region similarity J, contour accuracy F and PCK."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage


class MetricError(ValueError):
    pass


def _binary_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise MetricError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def region_similarity(pred, gt) -> float:
    """Intersection over union; 1 when both masks are empty."""
    pred, gt = _binary_pair(pred, gt)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def boundary(mask) -> np.ndarray:
    """Foreground pixels with a 4-neighbour in the background (image edge does not count)."""
    m = np.asarray(mask).astype(bool)
    p = np.pad(m, 1, mode="edge")
    inner = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~inner


def default_tolerance(shape) -> int:
    """0.8% of the image diagonal, rounded up."""
    return int(math.ceil(0.008 * math.hypot(shape[0], shape[1])))


def _disk(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return yy * yy + xx * xx <= radius * radius


def contour_accuracy(pred, gt, tolerance_px: int | None = None) -> float:
    """Boundary F-measure with disk-dilation matching at ``tolerance_px``."""
    pred, gt = _binary_pair(pred, gt)
    tol = default_tolerance(pred.shape) if tolerance_px is None else int(tolerance_px)
    bp, bg = boundary(pred), boundary(gt)
    n_p, n_g = bp.sum(), bg.sum()
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    if tol > 0:
        disk = _disk(tol)
        gt_dil = ndimage.binary_dilation(bg, structure=disk)
        pred_dil = ndimage.binary_dilation(bp, structure=disk)
    else:
        gt_dil, pred_dil = bg, bp
    precision = (bp & gt_dil).sum() / n_p
    recall = (bg & pred_dil).sum() / n_g
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def pck(pred, gt, alpha: float, reference_size: float) -> float:
    """Fraction of keypoints within ``alpha * reference_size`` (Euclidean) of ground truth.

    Not symmetric in its arguments once the reference size is derived from
    ``gt`` (see :func:`bbox_reference_size`).
    """
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise MetricError(f"keypoint counts differ: {pred.shape} vs {gt.shape}")
    if reference_size <= 0:
        raise MetricError("reference size must be positive")
    if len(pred) == 0:
        return 1.0
    err = np.linalg.norm(pred - gt, axis=-1)
    return float(np.mean(err <= alpha * reference_size))


def bbox_reference_size(gt_keypoints) -> float:
    """Max side of the ground-truth keypoints' bounding box."""
    k = np.asarray(gt_keypoints, dtype=np.float64)
    return float((k.max(axis=0) - k.min(axis=0)).max())


@dataclass
class SegScore:
    J_mean: float
    F_mean: float
    per_sequence: dict[str, tuple[float, float]] = field(default_factory=dict)

    @property
    def JF_mean(self) -> float:
        return 0.5 * (self.J_mean + self.F_mean)

    def summary(self) -> dict:
        return {"J_mean": self.J_mean, "F_mean": self.F_mean, "JF_mean": self.JF_mean,
                "sequences": len(self.per_sequence)}


def score_sequence(pred_labels: np.ndarray, gt_labels: np.ndarray, objects=None, skip_first: bool = True,
                   tolerance_px: int | None = None) -> list[tuple[int, float, float]]:
    """Per-frame (frame, J, F) averaged over object ids (background excluded)."""
    pred_labels, gt_labels = np.asarray(pred_labels), np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise MetricError(f"label stacks differ: {pred_labels.shape} vs {gt_labels.shape}")
    if objects is None:
        objects = [k for k in np.unique(gt_labels[0]) if k != 0]
    rows = []
    for t in range(1 if skip_first else 0, len(gt_labels)):
        js = [region_similarity(pred_labels[t] == k, gt_labels[t] == k) for k in objects]
        fs = [contour_accuracy(pred_labels[t] == k, gt_labels[t] == k, tolerance_px) for k in objects]
        rows.append((t, float(np.mean(js)) if js else 1.0, float(np.mean(fs)) if fs else 1.0))
    return rows


def aggregate(per_frame: dict[str, list[tuple[int, float, float]]]) -> SegScore:
    """Sequence means first, then the mean over sequences."""
    per_seq = {}
    for name, rows in per_frame.items():
        if rows:
            per_seq[name] = (float(np.mean([r[1] for r in rows])), float(np.mean([r[2] for r in rows])))
    if not per_seq:
        return SegScore(1.0, 1.0, {})
    J = float(np.mean([v[0] for v in per_seq.values()]))
    F = float(np.mean([v[1] for v in per_seq.values()]))
    return SegScore(J, F, per_seq)


def write_scores_csv(path, per_frame: dict[str, list[tuple[int, float, float]]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence", "frame", "J", "F"])
        for name, rows in per_frame.items():
            for t, j, f in rows:
                w.writerow([name, t, repr(j), repr(f)])


def read_scores_csv(path) -> dict[str, list[tuple[int, float, float]]]:
    out: dict[str, list] = {}
    with open(Path(path), newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["sequence"], []).append((int(row["frame"]), float(row["J"]), float(row["F"])))
    return out
