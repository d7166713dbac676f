"""End-to-end model: detector, gaze cone predictor and gaze object transformer."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .cone import GazeVectorHead, scene_score_matrix
from .data import default_sigma, derive_gt_gaze_vector, gaussian_target
from .detector import DetectorConfig, ObjectDetector, to_predictions
from .got import GazeObjectTransformer, GotConfig
from .losses import GazeTarget, LossWeights, SceneTargets, hungarian_match, matching_cost
from .scene import HEAD_LABEL, GazeVector, Scene


@dataclass
class ModelConfig:
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    got: GotConfig = field(default_factory=GotConfig)
    cone_mode: str = "2d"
    alpha: float = 120.0  # cone full angle in degrees
    depth_bins: Optional[int] = None  # defaults to the heatmap resolution
    gaze_hidden: int = 32

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        det = dict(d.get("detector", {}))
        if "stage_channels" in det:
            det["stage_channels"] = tuple(det["stage_channels"])
        rest = {k: v for k, v in d.items() if k not in ("detector", "got")}
        return cls(detector=DetectorConfig(**det), got=GotConfig(**d.get("got", {})), **rest)


def scenes_to_images(scenes: Sequence[Scene], dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.stack([sc.pixels for sc in scenes]), dtype=dtype)


class GazeModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.got.dim != cfg.detector.dim:
            raise ValueError("GOT and detector dims differ")
        if cfg.cone_mode not in ("2d", "3d"):
            raise ValueError(f"unknown cone mode {cfg.cone_mode!r}")
        self.cfg = cfg
        self.detector = ObjectDetector(cfg.detector)
        self.gaze_head = GazeVectorHead(cfg.detector.dim, cfg.gaze_hidden, cfg.cone_mode)
        self.got = GazeObjectTransformer(cfg.got, cfg.detector.num_queries)

    def backbone_parameters(self) -> List[nn.Parameter]:
        return list(self.detector.backbone.parameters())

    def threshold_selection(self, logits: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Head queries and kept key objects by the confidence rule."""
        probs = torch.softmax(logits.detach(), dim=-1)
        label = probs.argmax(-1)
        conf = probs[..., :-1].max(-1).values
        tau = self.cfg.got.tau
        is_head = (label == HEAD_LABEL) & (probs[..., HEAD_LABEL] > tau)
        keep = (label != logits.shape[-1] - 1) & (conf > tau)
        return is_head, keep

    def score_matrices(self, logits, boxes, gaze, is_head, depths) -> torch.Tensor:
        b, n = is_head.shape
        sigma = torch.zeros(b, n, n, dtype=boxes.dtype)
        R = self.cfg.got.resolution
        for k in range(b):
            heads = torch.nonzero(is_head[k]).flatten().tolist()
            if not heads:
                continue
            preds = to_predictions(logits[k], boxes[k])
            g = gaze[k].detach().double().cpu().numpy()
            vecs = {i: GazeVector(*g[i]) for i in heads}
            depth = None if self.cfg.cone_mode == "2d" else depths[k]
            sm = scene_score_matrix(preds, heads, vecs, R, self.cfg.alpha, self.cfg.cone_mode, depth, self.cfg.depth_bins)
            sigma[k] = torch.as_tensor(sm.sigma, dtype=boxes.dtype)
        return sigma

    def forward(self, images, depths=None, selection=None):
        """Full forward pass over a ``(B, C, H, W)`` batch.

        ``selection`` optionally overrides the ``(is_head, keep)`` masks that
        otherwise come from the confidence threshold.
        """
        return self.gaze_forward(self.detector(images), depths, selection)

    def gaze_forward(self, det, depths=None, selection=None):
        """Gaze branch on top of a detector output dict."""
        f_d = det["features"]
        gaze = self.gaze_head(f_d)
        is_head, keep = selection if selection is not None else self.threshold_selection(det["logits"])
        if depths is None:
            depths = [None] * f_d.shape[0]
        sigma = self.score_matrices(det["logits"], det["boxes"], gaze, is_head, depths)
        got = self.got(f_d, sigma, is_head, keep)
        return {**det, **got, "gaze": gaze, "sigma": sigma, "is_head": is_head, "keep": keep}


# -- targets and query association -------------------------------------------


def gt_head_index(scene: Scene, gaze_idx: int) -> int:
    box = scene.gazes[gaze_idx].head_bbox
    for k, (b, lab) in enumerate(scene.objects):
        if lab == HEAD_LABEL and b == box:
            return k
    raise ValueError(f"gaze {gaze_idx} of {scene.image_id} has no matching head object")


def scene_targets(scene: Scene, cfg: ModelConfig) -> SceneTargets:
    R = cfg.got.resolution
    depth = scene.depth if cfg.cone_mode == "3d" else None
    heads = []
    for gi, g in enumerate(scene.gazes):
        if g.inside:
            v = derive_gt_gaze_vector(g.head_bbox, g.mean_point(), R, depth, cfg.depth_bins)
            tgt = GazeTarget(False, (v.theta, v.phi, v.rho), gaussian_target(g.points, R, default_sigma(R)).grid)
        else:
            tgt = GazeTarget(True, None, None)
        heads.append((gt_head_index(scene, gi), tgt))
    labels = np.array([lab for _, lab in scene.objects], dtype=np.int64)
    boxes = np.array([b.as_list() for b, _ in scene.objects], dtype=np.float64).reshape(-1, 4)
    return SceneTargets(labels=labels, boxes=boxes, heads=heads)


def match_scene(logits, boxes, targets: SceneTargets, w: LossWeights):
    return hungarian_match(matching_cost(logits, boxes, targets.labels, targets.boxes, w))


def matched_selection(assignments, targets: Sequence[SceneTargets], n: int):
    """Masks where heads are the queries matched to gt heads and keys all matched queries."""
    b = len(assignments)
    is_head = torch.zeros(b, n, dtype=torch.bool)
    keep = torch.zeros(b, n, dtype=torch.bool)
    for k, (a, t) in enumerate(zip(assignments, targets)):
        gt_to_pred = {g: p for p, g in a.pairs}
        for p, _ in a.pairs:
            keep[k, p] = True
        for g, _ in t.heads:
            is_head[k, gt_to_pred[g]] = True
    return is_head, keep
