"""Training objective: box, class, gaze vector, watch-outside, heatmap terms and matching."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .scene import BBox


@dataclass
class LossWeights:
    lambda_l1: float = 1.0
    lambda_giou: float = 2.5
    lambda_heat: float = 2.0
    lambda_cls: float = 1.0
    lambda_vec: float = 1.0
    lambda_out: float = 1.0
    eos_weight: float = 0.1

    def check(self) -> None:
        for name, v in vars(self).items():
            if v < 0:
                raise ValueError(f"{name}={v} must be non-negative")


@dataclass
class Assignment:
    pairs: List[Tuple[int, int]]
    unmatched: List[int] = field(default_factory=list)


def box_cxcywh_to_xyxy(b: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def _area(b):
    return (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])


def giou_xyxy(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Element-wise generalized IoU of corner-format boxes (broadcasting)."""
    a, b = torch.broadcast_tensors(torch.as_tensor(a), torch.as_tensor(b))
    area_a, area_b = _area(a), _area(b)
    if bool((area_a <= 0).any()) or bool((area_b <= 0).any()):
        raise ValueError("degenerate box with non-positive area")
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a + area_b - inter
    iou = inter / union
    lt_c = torch.minimum(a[..., :2], b[..., :2])
    rb_c = torch.maximum(a[..., 2:], b[..., 2:])
    enclosure = _area(torch.cat([lt_c, rb_c], dim=-1))
    return iou - (enclosure - union) / enclosure


def pairwise_giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``(P, G)`` GIoU between center-format box sets ``(P, 4)`` and ``(G, 4)``."""
    return giou_xyxy(box_cxcywh_to_xyxy(a)[:, None, :], box_cxcywh_to_xyxy(b)[None, :, :])


def giou(a: BBox, b: BBox) -> float:
    ta = torch.tensor([a.xyxy()], dtype=torch.float64)
    tb = torch.tensor([b.xyxy()], dtype=torch.float64)
    return float(giou_xyxy(ta, tb)[0])


def l_box(pred: torch.Tensor, gt: torch.Tensor, w: LossWeights) -> torch.Tensor:
    """``lambda_l1 * |pred - gt|_1 - lambda_giou * GIoU`` for center-format boxes ``(..., 4)``."""
    l1 = (pred - gt).abs().sum(-1)
    g = giou_xyxy(box_cxcywh_to_xyxy(pred), box_cxcywh_to_xyxy(gt))
    return w.lambda_l1 * l1 - w.lambda_giou * g


def l_cls(logits: torch.Tensor, labels: torch.Tensor, eos_weight: float = 0.1) -> torch.Tensor:
    """Summed cross-entropy; targets of the last (no-object) class weigh ``eos_weight``."""
    n_cls = logits.shape[-1]
    labels = torch.as_tensor(labels, dtype=torch.long)
    if bool(((labels < 0) | (labels >= n_cls)).any()):
        raise ValueError(f"label out of range [0, {n_cls})")
    ce = F.cross_entropy(logits.reshape(-1, n_cls), labels.reshape(-1), reduction="none")
    weight = torch.where(labels.reshape(-1) == n_cls - 1, eos_weight, 1.0).to(ce.dtype)
    return (weight * ce).sum()


def l_vec(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Euclidean distance between ``(theta, phi, rho)`` triples."""
    return torch.linalg.vector_norm(pred - gt, dim=-1)


def l_out(p_out: torch.Tensor, out: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    p = p_out.clamp(eps, 1 - eps)
    out = torch.as_tensor(out, dtype=p.dtype)
    return -(out * torch.log(p) + (1 - out) * torch.log(1 - p))


def l_heat(pred: torch.Tensor, target: torch.Tensor, lambda_heat: float = 2.0) -> torch.Tensor:
    """Frobenius distance between heatmaps ``(..., R, R)``, times ``lambda_heat``."""
    if pred.shape[-2:] != target.shape[-2:]:
        raise ValueError(f"heatmap resolution mismatch {tuple(pred.shape[-2:])} vs {tuple(target.shape[-2:])}")
    return lambda_heat * torch.linalg.vector_norm((target - pred).flatten(-2), dim=-1)


def hungarian_match(cost) -> Assignment:
    """Minimum-cost assignment of every ground truth (column) to a prediction (row)."""
    cost = np.asarray(cost, dtype=np.float64)
    p, g = cost.shape
    if p < g:
        raise ValueError(f"{p} predictions cannot cover {g} ground-truth objects")
    if not np.all(np.isfinite(cost)):
        raise ValueError("matching cost must be finite")
    if g == 0:
        return Assignment(pairs=[], unmatched=list(range(p)))
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()), key=lambda rc: rc[1])
    used = set(rows.tolist())
    return Assignment(pairs=pairs, unmatched=[i for i in range(p) if i not in used])


def matching_cost(logits: torch.Tensor, boxes: torch.Tensor, gt_labels, gt_boxes, w: LossWeights) -> np.ndarray:
    """Set-prediction cost ``(N, G)``: class probability, box L1 and GIoU."""
    with torch.no_grad():
        prob = torch.softmax(logits.double(), dim=-1)
        gt_boxes = torch.as_tensor(gt_boxes, dtype=torch.float64).reshape(-1, 4)
        gt_labels = torch.as_tensor(gt_labels, dtype=torch.long)
        b = boxes.double()
        c = -w.lambda_cls * prob[:, gt_labels]
        c = c + w.lambda_l1 * torch.cdist(b, gt_boxes, p=1)
        c = c - w.lambda_giou * pairwise_giou(b, gt_boxes)
    return c.numpy()


@dataclass
class SceneTargets:
    labels: np.ndarray  # (G,)
    boxes: np.ndarray  # (G, 4)
    heads: List[Tuple[int, "GazeTarget"]]  # (gt object index, gaze target)


@dataclass
class GazeTarget:
    out: bool
    vector: Optional[Tuple[float, float, float]]
    heatmap: Optional[np.ndarray]


def total_loss(outputs: dict, targets: SceneTargets, assignment: Assignment, w: LossWeights, b: int = 0):
    """Weighted objective for batch element ``b`` and its per-term breakdown.

    ``outputs`` holds ``logits``, ``boxes``, ``gaze``, ``heatmaps`` and
    ``p_out`` with a leading batch axis.
    """
    logits, boxes = outputs["logits"][b], outputs["boxes"][b]
    n, n_cls = logits.shape
    dtype = boxes.dtype
    labels = torch.full((n,), n_cls - 1, dtype=torch.long)
    zero = torch.zeros((), dtype=dtype)
    terms = {"box": zero, "cls": zero, "vec": zero, "out": zero, "heat": zero}
    gt_to_pred = {gi: pi for pi, gi in assignment.pairs}
    if assignment.pairs:
        pi = torch.tensor([p for p, _ in assignment.pairs])
        gi = [g for _, g in assignment.pairs]
        labels[pi] = torch.as_tensor(targets.labels[gi], dtype=torch.long)
        gt_boxes = torch.as_tensor(targets.boxes[gi], dtype=dtype)
        terms["box"] = l_box(boxes[pi], gt_boxes, w).sum()
    terms["cls"] = w.lambda_cls * l_cls(logits, labels, w.eos_weight)
    for g_idx, tgt in targets.heads:
        q = gt_to_pred[g_idx]
        terms["out"] = terms["out"] + w.lambda_out * l_out(outputs["p_out"][b, q], float(tgt.out))
        if tgt.out:
            continue
        vec = torch.as_tensor(tgt.vector, dtype=dtype)
        terms["vec"] = terms["vec"] + w.lambda_vec * l_vec(outputs["gaze"][b, q], vec)
        heat = torch.as_tensor(tgt.heatmap, dtype=dtype)
        terms["heat"] = terms["heat"] + l_heat(outputs["heatmaps"][b, q], heat, w.lambda_heat)
    total = sum(terms.values())
    return total, {k: float(v.detach()) for k, v in terms.items()}
