"""Gaze cone predictor: gaze vector regression, cone fields, object scores."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .scene import GazeVector, ObjectPrediction, to_grid_coords

# Absorbs rounding so cells sitting exactly on the cone boundary stay inside.
BOUNDARY_EPS = 1e-12


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # components summed left to right so the scalar and field paths round identically
    out = a[..., 0] * b[..., 0]
    for k in range(1, a.shape[-1]):
        out = out + a[..., k] * b[..., k]
    return out


def _cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _dot(a, b) / (np.sqrt(_dot(a, a)) * np.sqrt(_dot(b, b)))


def conditioned_cosine(v_a: Sequence[float], v_b: Sequence[float], alpha: float = 120.0) -> float:
    """Cosine similarity of two vectors, zeroed outside a cone of full angle ``alpha`` degrees."""
    a = np.asarray(v_a, dtype=np.float64)
    b = np.asarray(v_b, dtype=np.float64)
    if not a.any() or not b.any():
        raise ValueError("conditioned_cosine needs non-zero vectors")
    if not 0.0 < alpha <= 180.0:
        raise ValueError(f"alpha={alpha} must lie in (0, 180]")
    c = float(np.clip(_cosine(a, b), -1.0, 1.0))
    return c if c >= math.cos(math.radians(alpha) / 2) - BOUNDARY_EPS else 0.0


def _masked_cosine(offsets: np.ndarray, direction: np.ndarray, alpha: float) -> np.ndarray:
    nonzero = offsets.any(axis=-1)
    safe = np.where(nonzero[..., None], offsets, 1.0)
    c = np.clip(_cosine(safe, np.broadcast_to(direction, safe.shape)), -1.0, 1.0)
    inside = (c >= math.cos(math.radians(alpha) / 2) - BOUNDARY_EPS) & nonzero
    return np.where(inside, c, 0.0)


@dataclass(frozen=True)
class ConeField:
    """Saliency of a discretized 2D ``(h, w)`` or 3D ``(h, w, d)`` field.

    ``values`` is indexed ``[y, x]`` or ``[y, x, z]``; ``apex`` is ``(x, y[, z])``.
    """

    values: np.ndarray
    apex: Tuple[int, ...]
    axis: GazeVector
    alpha: float

    @property
    def mode(self) -> str:
        return "3d" if self.values.ndim == 3 else "2d"

    def value_at(self, x: int, y: int, z: Optional[int] = None) -> float:
        if self.values.ndim == 3:
            return float(self.values[y, x, z])
        return float(self.values[y, x])

    def slice2d(self, z: Optional[int] = None) -> np.ndarray:
        """2D view for export; 3D cones default to the apex depth plane."""
        if self.values.ndim == 2:
            return self.values
        return self.values[:, :, self.apex[2] if z is None else z]


def _direction(gaze: GazeVector, mode: str) -> np.ndarray:
    if mode == "2d":
        return np.array([math.cos(gaze.phi), -math.sin(gaze.phi)])
    return gaze.direction()


def build_cone(
    head_center: Sequence[int],
    gaze: GazeVector,
    dims: Sequence[int],
    alpha: float = 120.0,
    mode: str = "2d",
) -> ConeField:
    """Evaluate the angle-conditioned cosine from the apex to every cell.

    ``dims`` is ``(w, h)`` in 2D and ``(w, h, d)`` in 3D. The apex cell is 0.
    """
    if mode not in ("2d", "3d"):
        raise ValueError(f"unknown cone mode {mode!r}")
    ndim = 2 if mode == "2d" else 3
    if len(dims) != ndim or len(head_center) != ndim:
        raise ValueError(f"{mode} cone needs {ndim} dims and a {ndim}-coordinate apex")
    apex = tuple(int(c) for c in head_center)
    if any(not 0 <= c < n for c, n in zip(apex, dims)):
        raise ValueError(f"apex {apex} outside grid {tuple(dims)}")
    axes = [np.arange(n, dtype=np.float64) - c for n, c in zip(dims, apex)]
    # meshgrid over (y, x[, z]) so values come out indexed [y, x(, z)]
    if ndim == 2:
        gy, gx = np.meshgrid(axes[1], axes[0], indexing="ij")
        offsets = np.stack([gx, gy], axis=-1)
    else:
        gy, gx, gz = np.meshgrid(axes[1], axes[0], axes[2], indexing="ij")
        offsets = np.stack([gx, gy, gz], axis=-1)
    values = _masked_cosine(offsets, _direction(gaze, mode), alpha)
    return ConeField(values=values, apex=apex, axis=gaze, alpha=alpha)


def sample_depth(depth: np.ndarray, x: float, y: float) -> float:
    """Depth value at the grid cell containing normalized point ``(x, y)``."""
    h, w = depth.shape
    i = min(max(math.floor(y * h), 0), h - 1)
    j = min(max(math.floor(x * w), 0), w - 1)
    return float(depth[i, j])


def depth_cell(value: float, d: int) -> int:
    return min(max(math.floor(value * d), 0), d - 1)


def cone_cell(cx: float, cy: float, dims: Sequence[int], depth: Optional[np.ndarray]) -> Tuple[int, ...]:
    """Cell ``(x, y[, z])`` of a normalized center inside a cone grid."""
    r, c = to_grid_coords((cx, cy), dims[0])
    if len(dims) == 2:
        return c, r
    if depth is None:
        raise ValueError("3D cones need a depth grid")
    return c, r, depth_cell(sample_depth(depth, cx, cy), dims[2])


@dataclass(frozen=True)
class ScoreMatrix:
    sigma: np.ndarray
    head_rows: Tuple[int, ...]

    def empty_rows(self, columns: Optional[Sequence[int]] = None) -> Tuple[int, ...]:
        """Head rows with no in-cone object among ``columns`` (all columns by default)."""
        sub = self.sigma if columns is None else self.sigma[:, list(columns)]
        return tuple(i for i in self.head_rows if not np.any(sub[i] != 0))


def object_score_matrix(
    predictions: Sequence[ObjectPrediction],
    head_indices: Sequence[int],
    cones: Mapping[int, ConeField],
    depth: Optional[np.ndarray] = None,
) -> ScoreMatrix:
    """Sample each head's cone at every other object's center cell."""
    n = len(predictions)
    sigma = np.zeros((n, n), dtype=np.float64)
    for i in head_indices:
        if i not in cones:
            raise KeyError(f"head index {i} has no cone")
        cone = cones[i]
        h, w = cone.values.shape[:2]
        dims = (w, h) if cone.values.ndim == 2 else (w, h, cone.values.shape[2])
        for j, pred in enumerate(predictions):
            if j == i:
                continue
            cell = cone_cell(pred.bbox.cx, pred.bbox.cy, dims, depth)
            sigma[i, j] = cone.value_at(*cell)
    return ScoreMatrix(sigma=sigma, head_rows=tuple(int(i) for i in head_indices))


def head_apex(pred: ObjectPrediction, dims: Sequence[int], depth: Optional[np.ndarray]) -> Tuple[int, ...]:
    return cone_cell(pred.bbox.cx, pred.bbox.cy, dims, depth)


def scene_score_matrix(
    predictions: Sequence[ObjectPrediction],
    head_indices: Sequence[int],
    gazes: Mapping[int, GazeVector],
    R: int,
    alpha: float = 120.0,
    mode: str = "2d",
    depth: Optional[np.ndarray] = None,
    depth_bins: Optional[int] = None,
) -> ScoreMatrix:
    """Build one cone per head from its predicted box and gaze, then score objects."""
    dims = (R, R) if mode == "2d" else (R, R, depth_bins or R)
    cones = {
        i: build_cone(head_apex(predictions[i], dims, depth), gazes[i], dims, alpha, mode)
        for i in head_indices
    }
    return object_score_matrix(predictions, head_indices, cones, depth)


class GazeVectorHead(nn.Module):
    """MLP from head features to ``(theta, phi, rho)``.

    Raw outputs pass through bounded bijections: ``theta = pi * sigmoid``,
    ``phi = pi * tanh`` and ``rho = softplus``. In 2D mode theta is pinned to pi/2.
    """

    def __init__(self, dim: int, hidden: int = 0, mode: str = "2d"):
        super().__init__()
        self.mode = mode
        if hidden:
            self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, 3))
        else:
            self.mlp = nn.Linear(dim, 3)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        z = self.mlp(feats)
        theta = math.pi * torch.sigmoid(z[..., 0])
        if self.mode == "2d":
            theta = torch.full_like(theta, math.pi / 2)
        phi = math.pi * torch.tanh(z[..., 1])
        rho = F.softplus(z[..., 2])
        return torch.stack([theta, phi, rho], dim=-1)


def predict_gaze_vector(head: GazeVectorHead, features) -> GazeVector:
    with torch.no_grad():
        feats = torch.as_tensor(np.asarray(features), dtype=next(head.parameters()).dtype)
        theta, phi, rho = (float(v) for v in head(feats))
    # float32 rounding can step just past the open ranges
    theta = math.pi / 2 if head.mode == "2d" else min(max(theta, 0.0), math.pi)
    return GazeVector(theta, min(max(phi, -math.pi), math.pi), rho)

