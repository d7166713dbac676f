"""Gaze target detection metrics and the report that aggregates them."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .scene import BBox, ObjectPrediction, to_grid_coords

DECILES = tuple(round(0.1 * k, 1) for k in range(1, 11))
COCO_IOUS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))


def auc(pred: np.ndarray, gt_points: Sequence[Tuple[float, float]]) -> Optional[float]:
    """ROC AUC with one sample per heatmap cell; cells holding a gt point are positive.

    Ties count one half (midranks). Returns None when every cell has the
    same label.
    """
    if len(gt_points) == 0:
        raise ValueError("auc needs at least one ground-truth point")
    pred = np.asarray(pred, dtype=np.float64)
    h, w = pred.shape
    labels = np.zeros((h, w), dtype=bool)
    for p in gt_points:
        labels[to_grid_coords(p, h)] = True
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(pred.ravel(), method="average")
    u = ranks[labels.ravel()].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def gaze_distance(pred_point, gt_points, avg_mode: str = "mean_point") -> Tuple[float, float]:
    """(average L2, minimum L2 over gt points).

    The average is measured to the mean gt point; ``avg_mode="per_point"``
    averages the per-point distances instead.
    """
    gt = np.asarray(gt_points, dtype=np.float64).reshape(-1, 2)
    if len(gt) == 0:
        raise ValueError("gaze_distance needs at least one ground-truth point")
    p = np.asarray(pred_point, dtype=np.float64)
    per_point = np.linalg.norm(gt - p, axis=1)
    if avg_mode == "mean_point":
        avg = float(np.linalg.norm(gt.mean(axis=0) - p))
    elif avg_mode == "per_point":
        avg = float(per_point.mean())
    else:
        raise ValueError(f"unknown avg_mode {avg_mode!r}")
    mn = float(per_point.min())
    return avg, mn


def _angle_deg(u: np.ndarray, v: np.ndarray) -> float:
    cross = u[0] * v[1] - u[1] * v[0]
    return math.degrees(abs(math.atan2(cross, float(u @ v))))


def angular_error(pred_point, gt_points, head_center) -> Optional[Tuple[float, float, float]]:
    """(min, avg, max) angle in degrees between predicted and gt gaze directions.

    Gt points coinciding with the head center are skipped; None if none remain.
    """
    c = np.asarray(head_center, dtype=np.float64)
    u = np.asarray(pred_point, dtype=np.float64) - c
    if not np.any(u):
        raise ValueError("predicted point coincides with the head center")
    angles = [_angle_deg(u, np.asarray(g, dtype=np.float64) - c) for g in gt_points if np.any(np.asarray(g) - c)]
    if not angles:
        return None
    return min(angles), sum(angles) / len(angles), max(angles)


def average_precision(scores: Sequence[float], positives: Sequence[bool], n_positives: Optional[int] = None) -> Optional[float]:
    """Area under the interpolated precision-recall curve (all points).

    Tied scores enter the curve together. ``n_positives`` may exceed the
    number of positive detections to account for missed ground truth.
    """
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    total = int(pos.sum()) if n_positives is None else int(n_positives)
    if total == 0:
        return None
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    s, t = scores[order], pos[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(t)[last]
    fp = (last + 1) - tp
    recall = np.r_[0.0, tp / total]
    precision = np.r_[1.0, tp / (tp + fp)]
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum(np.diff(recall) * envelope[1:]))


def io_ap(pairs: Sequence[Tuple[float, int]]) -> Optional[float]:
    """AP of the out-of-frame probability; ``pairs`` are ``(p_out, gt_out)``."""
    if not pairs:
        return None
    scores, labels = zip(*pairs)
    return average_precision(scores, [bool(v) for v in labels])


def box_iou(a: BBox, b: BBox) -> float:
    ax0, ay0, ax1, ay1 = a.xyxy()
    bx0, by0, bx1, by1 = b.xyxy()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def select_gazed_object(
    predictions: Sequence[ObjectPrediction],
    candidates: Sequence[int],
    point: Tuple[float, float],
    sigma_row: Optional[np.ndarray] = None,
) -> Optional[int]:
    """Candidate whose box contains ``point``; ties go to cone score, then confidence."""
    hits = [j for j in candidates if predictions[j].bbox.contains(*point)]
    if not hits:
        return None
    def key(j):
        cone = 0.0 if sigma_row is None else float(sigma_row[j])
        return (-cone, -predictions[j].confidence, j)
    return min(hits, key=key)


def gazed_object_map(
    detections: Sequence[Optional[Tuple[BBox, int, float]]],
    ground_truth: Sequence[Optional[Tuple[BBox, int]]],
    iou_thresholds: Sequence[float] = (0.5, 0.75),
) -> Dict[float, Optional[float]]:
    """AP of per-head gazed-object predictions at each IoU threshold.

    Entry ``k`` of both lists belongs to the same head. Heads without a gt
    gazed object are skipped; heads with gt but no prediction are misses.
    A hit needs the same class and IoU strictly above the threshold.
    """
    out: Dict[float, Optional[float]] = {}
    heads = [(d, g) for d, g in zip(detections, ground_truth) if g is not None]
    for thr in iou_thresholds:
        scores, hits = [], []
        for det, (gbox, glab) in heads:
            if det is None:
                continue
            box, lab, score = det
            scores.append(score)
            hits.append(lab == glab and box_iou(box, gbox) > thr)
        out[thr] = average_precision(scores, hits, n_positives=len(heads))
    return out


def retained_points(
    gazes: Sequence[Sequence[Tuple[float, float]]], retain_fraction: float
) -> List[List[Tuple[float, float]]]:
    """Keep gt points whose distance to their gaze's mean point is within the pooled quantile."""
    if not any(math.isclose(retain_fraction, f) for f in DECILES):
        raise ValueError(f"retain_fraction {retain_fraction} not in {DECILES}")
    dists = []
    for pts in gazes:
        arr = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        dists.append(np.linalg.norm(arr - arr.mean(axis=0), axis=1))
    pooled = np.concatenate(dists) if dists else np.zeros(0)
    if len(pooled) == 0:
        return [[] for _ in gazes]
    threshold = np.quantile(pooled, retain_fraction, method="inverted_cdf")
    return [[tuple(p) for p, d in zip(pts, ds) if d <= threshold] for pts, ds in zip(gazes, dists)]


def variance_decile_auc(
    heatmaps: Sequence[np.ndarray], gazes: Sequence[Sequence[Tuple[float, float]]], retain_fraction: float
) -> Optional[float]:
    """Mean AUC after discarding annotations far from their gaze's mean point."""
    kept = retained_points(gazes, retain_fraction)
    values = [auc(h, pts) for h, pts in zip(heatmaps, kept) if pts]
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


@dataclass
class HeadRecord:
    """Everything the report needs about one annotated head."""

    image_id: str
    head_bbox: BBox
    gt_points: List[Tuple[float, float]]
    gt_out: bool
    heatmap: Optional[np.ndarray]
    p_out: Optional[float]
    used_skip: Optional[bool] = None
    gazed_pred: Optional[Tuple[BBox, int, float]] = None
    gazed_gt: Optional[Tuple[BBox, int]] = None


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


@dataclass
class EvalReport:
    auc: Optional[float] = None
    avg_dist: Optional[float] = None
    min_dist: Optional[float] = None
    angular_err: Dict[str, Optional[float]] = field(default_factory=dict)
    io_ap: Optional[float] = None
    gazed_map: Dict[str, Optional[float]] = field(default_factory=dict)
    decile_auc: List[Optional[float]] = field(default_factory=list)
    scenes: int = 0
    heads: int = 0
    heads_in_frame: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


def summarize(records: Sequence[HeadRecord], scenes: int) -> EvalReport:
    """Aggregate per-head records; in-frame metrics average over in-frame heads."""
    inside = [r for r in records if not r.gt_out and r.heatmap is not None]
    aucs, avgs, mins, angles = [], [], [], []
    for r in inside:
        aucs.append(auc(r.heatmap, r.gt_points))
        pt = _argmax_point(r.heatmap)
        a, m = gaze_distance(pt, r.gt_points)
        avgs.append(a)
        mins.append(m)
        if pt != (r.head_bbox.cx, r.head_bbox.cy):
            angles.append(angular_error(pt, r.gt_points, (r.head_bbox.cx, r.head_bbox.cy)))
    angles = [a for a in angles if a is not None]
    pairs = [(r.p_out, int(r.gt_out)) for r in records if r.p_out is not None]
    maps = gazed_object_map([r.gazed_pred for r in records], [r.gazed_gt for r in records], COCO_IOUS)
    coco = [v for v in maps.values() if v is not None]
    heat = [r.heatmap for r in inside]
    pts = [r.gt_points for r in inside]
    return EvalReport(
        auc=_mean(aucs),
        avg_dist=_mean(avgs),
        min_dist=_mean(mins),
        angular_err={
            "min": _mean([a[0] for a in angles]),
            "avg": _mean([a[1] for a in angles]),
            "max": _mean([a[2] for a in angles]),
        },
        io_ap=io_ap(pairs) if any(p[1] for p in pairs) else None,
        gazed_map={"ap50": maps[0.5], "ap75": maps[0.75], "ap": float(np.mean(coco)) if coco else None},
        decile_auc=[variance_decile_auc(heat, pts, f) if inside else None for f in DECILES],
        scenes=scenes,
        heads=len(records),
        heads_in_frame=len(inside),
    )


def _argmax_point(grid: np.ndarray) -> Tuple[float, float]:
    r, c = np.unravel_index(int(np.argmax(grid)), grid.shape)
    return (c + 0.5) / grid.shape[1], (r + 0.5) / grid.shape[0]


def write_audit_csv(records: Sequence[HeadRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "head_cx", "head_cy", "gt_out", "p_out", "pred_x", "pred_y", "auc", "avg_dist", "min_dist"])
        for r in records:
            row = [r.image_id, r.head_bbox.cx, r.head_bbox.cy, int(r.gt_out), r.p_out]
            if r.heatmap is not None and not r.gt_out:
                pt = _argmax_point(r.heatmap)
                row += [pt[0], pt[1], auc(r.heatmap, r.gt_points), *gaze_distance(pt, r.gt_points)]
            else:
                row += ["", "", "", "", ""]
            writer.writerow(row)
