"""Core scene types, validation, and the on-disk formats they use."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

HEAD_LABEL = 0

DEPTH_MAGIC = b"DGRD"
HEATMAP_MAGIC = b"HMAP"


@dataclass(frozen=True)
class BBox:
    """Center-format box, normalized to the image extent."""

    cx: float
    cy: float
    w: float
    h: float

    def as_list(self) -> List[float]:
        return [self.cx, self.cy, self.w, self.h]

    def xyxy(self) -> Tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    def contains(self, x: float, y: float) -> bool:
        x0, y0, x1, y1 = self.xyxy()
        return x0 <= x <= x1 and y0 <= y <= y1

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "BBox":
        cx, cy, w, h = (float(v) for v in values)
        return cls(cx, cy, w, h)


@dataclass(frozen=True)
class ObjectPrediction:
    bbox: BBox
    label: int
    confidence: float


@dataclass(frozen=True)
class GazeVector:
    """Gaze direction in spherical form: polar angle, azimuth, magnitude.

    The azimuth is measured counter-clockwise from +x with image y pointing
    down, so a target directly below the head has ``phi = -pi/2``.
    """

    theta: float
    phi: float
    rho: float

    def direction(self) -> np.ndarray:
        """Unit direction in grid axes (x right, y down, z deeper)."""
        st = math.sin(self.theta)
        return np.array([st * math.cos(self.phi), -st * math.sin(self.phi), math.cos(self.theta)])

    @classmethod
    def from_offset(cls, dx: float, dy: float, dz: float = 0.0) -> "GazeVector":
        rho = math.sqrt(dx * dx + dy * dy + dz * dz)
        if rho == 0.0:
            raise ValueError("gaze offset has zero length")
        theta = math.acos(max(-1.0, min(1.0, dz / rho)))
        phi = math.atan2(-dy, dx)
        return cls(theta, phi, rho)


@dataclass(frozen=True)
class GazeAnnotation:
    head_bbox: BBox
    points: Tuple[Tuple[float, float], ...]
    inside: bool

    @property
    def out(self) -> bool:
        return not self.inside

    def mean_point(self) -> Tuple[float, float]:
        pts = np.asarray(self.points, dtype=np.float64)
        return float(pts[:, 0].mean()), float(pts[:, 1].mean())


@dataclass(frozen=True)
class Scene:
    image_id: str
    width: int
    height: int
    pixels: Optional[np.ndarray] = field(default=None, compare=False)
    depth: Optional[np.ndarray] = field(default=None, compare=False)
    objects: Tuple[Tuple[BBox, int], ...] = ()
    gazes: Tuple[GazeAnnotation, ...] = ()


@dataclass(frozen=True)
class Heatmap:
    grid: np.ndarray

    @property
    def resolution(self) -> int:
        return self.grid.shape[0]

    def argmax_point(self) -> Tuple[float, float]:
        """Center of the highest cell as a normalized (x, y) point."""
        r, c = np.unravel_index(int(np.argmax(self.grid)), self.grid.shape)
        return (c + 0.5) / self.grid.shape[1], (r + 0.5) / self.grid.shape[0]


def to_grid_coords(p: Sequence[float], R: int) -> Tuple[int, int]:
    """Map a normalized ``(x, y)`` point to its ``(row, col)`` cell."""
    x, y = float(p[0]), float(p[1])
    if not (math.isfinite(x) and math.isfinite(y)):
        raise ValueError(f"non-finite point {p!r}")
    i = min(max(math.floor(y * R), 0), R - 1)
    j = min(max(math.floor(x * R), 0), R - 1)
    return i, j


def _check_bbox(box: BBox, where: str, out: List[str]) -> None:
    for name in ("cx", "cy"):
        v = getattr(box, name)
        if not (math.isfinite(v) and 0.0 <= v <= 1.0):
            out.append(f"{where}.{name}={v!r} outside [0, 1]")
    for name in ("w", "h"):
        v = getattr(box, name)
        if not (math.isfinite(v) and 0.0 < v <= 1.0):
            out.append(f"{where}.{name}={v!r} outside (0, 1]")


def validate_scene(scene: Scene) -> List[str]:
    """Return human-readable invariant violations; empty when valid."""
    problems: List[str] = []
    try:
        if not (isinstance(scene.width, int) and scene.width > 0):
            problems.append(f"width={scene.width!r} must be a positive int")
        if not (isinstance(scene.height, int) and scene.height > 0):
            problems.append(f"height={scene.height!r} must be a positive int")
        if scene.pixels is not None:
            px = np.asarray(scene.pixels)
            if px.ndim != 3:
                problems.append(f"pixels has {px.ndim} dims, expected C x H x W")
            elif not np.all(np.isfinite(px)) or px.min(initial=0) < 0 or px.max(initial=0) > 1:
                problems.append("pixels values outside [0, 1]")
        if scene.depth is not None:
            d = np.asarray(scene.depth)
            if d.ndim != 2 or d.size == 0:
                problems.append("depth must be a non-empty 2D grid")
            elif not np.all(np.isfinite(d)) or d.min() < 0 or d.max() > 1:
                problems.append("depth values outside [0, 1]")
        for k, (box, label) in enumerate(scene.objects):
            _check_bbox(box, f"objects[{k}].bbox", problems)
            if not (isinstance(label, (int, np.integer)) and label >= 0):
                problems.append(f"objects[{k}].label={label!r} must be a non-negative int")
        heads = [box for box, label in scene.objects if label == HEAD_LABEL]
        for k, g in enumerate(scene.gazes):
            _check_bbox(g.head_bbox, f"gazes[{k}].head_bbox", problems)
            if g.inside and len(g.points) == 0:
                problems.append(f"gazes[{k}].points empty while inside is true")
            if not g.inside and len(g.points) > 0:
                problems.append(f"gazes[{k}].points non-empty while inside is false")
            for x, y in g.points:
                if not (math.isfinite(x) and math.isfinite(y) and 0 <= x <= 1 and 0 <= y <= 1):
                    problems.append(f"gazes[{k}].points ({x!r}, {y!r}) outside [0, 1]^2")
            if g.head_bbox not in heads:
                problems.append(f"gazes[{k}].head_bbox is not listed as a head object")
    except Exception as exc:  # validation reports, never raises
        problems.append(f"malformed scene: {exc!r}")
    return problems


# -- JSON annotations --------------------------------------------------------


def scene_to_dict(scene: Scene, image: Optional[str] = None, depth: Optional[str] = None) -> dict:
    out = {
        "image_id": scene.image_id,
        "image": image,
        "width": scene.width,
        "height": scene.height,
        "objects": [{"bbox": box.as_list(), "label": int(label)} for box, label in scene.objects],
        "gazes": [
            {"head_bbox": g.head_bbox.as_list(), "points": [list(p) for p in g.points], "inside": g.inside}
            for g in scene.gazes
        ],
    }
    if depth is not None:
        out["depth"] = depth
    return out


def scene_from_dict(d: dict, pixels: Optional[np.ndarray] = None, depth: Optional[np.ndarray] = None) -> Scene:
    objects = tuple((BBox.from_list(o["bbox"]), int(o["label"])) for o in d.get("objects", []))
    gazes = tuple(
        GazeAnnotation(
            head_bbox=BBox.from_list(g["head_bbox"]),
            points=tuple((float(p[0]), float(p[1])) for p in g.get("points", [])),
            inside=bool(g["inside"]),
        )
        for g in d.get("gazes", [])
    )
    return Scene(
        image_id=str(d.get("image_id", d.get("image", ""))),
        width=int(d["width"]),
        height=int(d["height"]),
        pixels=pixels,
        depth=depth,
        objects=objects,
        gazes=gazes,
    )


# -- binary grids -------------------------------------------------------------


def encode_grid(grid: np.ndarray, magic: bytes) -> bytes:
    g = np.ascontiguousarray(grid, dtype="<f4")
    if g.ndim != 2:
        raise ValueError("grid must be 2D")
    h, w = g.shape
    return magic + struct.pack("<II", w, h) + g.tobytes()


def decode_grid(data: bytes, magic: bytes) -> np.ndarray:
    if data[:4] != magic:
        raise ValueError(f"bad magic {data[:4]!r}, expected {magic!r}")
    w, h = struct.unpack("<II", data[4:12])
    body = data[12:]
    if len(body) != 4 * w * h:
        raise ValueError(f"grid payload is {len(body)} bytes, expected {4 * w * h}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float32)


def write_grid(path, grid: np.ndarray, magic: bytes) -> None:
    Path(path).write_bytes(encode_grid(grid, magic))


def read_grid(path, magic: bytes) -> np.ndarray:
    return decode_grid(Path(path).read_bytes(), magic)


def normalize_depth(raw: np.ndarray) -> np.ndarray:
    """Rescale a raw depth grid to [0, 1]; constant grids map to 0.5."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.full(raw.shape, 0.5, dtype=np.float32)
    return ((raw - lo) / (hi - lo)).astype(np.float32)


def save_scene_json(scene: Scene, path, image: Optional[str] = None, depth: Optional[str] = None) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene, image, depth), indent=1))
