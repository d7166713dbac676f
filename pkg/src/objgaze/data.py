"""Dataset ingestion, ground-truth targets and the synthetic scene generator."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .cone import sample_depth
from .scene import (
    DEPTH_MAGIC,
    HEAD_LABEL,
    BBox,
    GazeAnnotation,
    GazeVector,
    Heatmap,
    Scene,
    read_grid,
    save_scene_json,
    scene_from_dict,
    validate_scene,
    write_grid,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# Fill colours per class; index 0 is the head class.
CLASS_COLORS = np.array(
    [
        [230, 180, 140],
        [200, 40, 40],
        [40, 160, 60],
        [50, 70, 200],
        [220, 200, 40],
        [160, 60, 180],
        [40, 190, 190],
        [240, 120, 20],
    ],
    dtype=np.uint8,
)
BACKGROUND = 96


def default_sigma(R: int) -> float:
    return 3.0 * R / 64


def gaussian_target(points: Sequence[Tuple[float, float]], R: int, sigma_cells: Optional[float] = None) -> Heatmap:
    """Max over per-point Gaussians on an ``R x R`` grid, distances in cells."""
    if len(points) == 0:
        raise ValueError("gaussian_target needs at least one point")
    sigma = default_sigma(R) if sigma_cells is None else sigma_cells
    if sigma <= 0:
        raise ValueError("sigma_cells must be positive")
    centers = np.arange(R, dtype=np.float64) + 0.5
    grid = np.zeros((R, R), dtype=np.float64)
    for x, y in points:
        dx = centers[None, :] - x * R
        dy = centers[:, None] - y * R
        grid = np.maximum(grid, np.exp(-(dx * dx + dy * dy) / (2 * sigma * sigma)))
    return Heatmap(grid)


def derive_gt_gaze_vector(
    head_bbox: BBox,
    point: Tuple[float, float],
    R: int,
    depth: Optional[np.ndarray] = None,
    depth_bins: Optional[int] = None,
) -> GazeVector:
    """Gaze vector from head center to a gaze point, in grid units.

    With a depth grid the z offset is the depth difference scaled to
    ``depth_bins`` cells; without one the vector is planar.
    """
    dx = (point[0] - head_bbox.cx) * R
    dy = (point[1] - head_bbox.cy) * R
    dz = 0.0
    if depth is not None:
        d = depth_bins or R
        dz = (sample_depth(depth, *point) - sample_depth(depth, head_bbox.cx, head_bbox.cy)) * d
    if dx == 0 and dy == 0 and dz == 0:
        raise ValueError("gaze point coincides with the head center")
    return GazeVector.from_offset(dx, dy, dz)


# -- synthetic generator -----------------------------------------------------


@dataclass
class SynthConfig:
    seed: int = 0
    scenes: int = 20
    image_size: int = 64
    resolution: int = 32
    objects: Tuple[int, int] = (2, 4)  # non-head objects per scene, inclusive
    heads: Tuple[int, int] = (1, 2)
    num_classes: int = 6  # head + object classes + no-object
    p_gaze_object: float = 0.8
    p_out: float = 0.2
    depth_mode: str = "flat"  # flat | layered
    points_per_gaze: int = 1
    point_jitter: float = 0.05
    max_tries: int = 200

    def check(self) -> None:
        for name in ("p_gaze_object", "p_out"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.scenes < 1 or self.objects[0] < 0 or self.heads[0] < 1 or self.points_per_gaze < 1:
            raise ValueError("scene, head and point counts must be >= 1")
        if self.objects[0] > self.objects[1] or self.heads[0] > self.heads[1]:
            raise ValueError("count ranges must be (low, high) with low <= high")
        if self.num_classes < 3 or self.num_classes - 1 > len(CLASS_COLORS):
            raise ValueError(f"num_classes must lie in [3, {len(CLASS_COLORS) + 1}]")
        if self.depth_mode not in ("flat", "layered"):
            raise ValueError(f"unknown depth mode {self.depth_mode!r}")


def _overlaps(a, b, margin):
    return not (a[2] + margin <= b[0] or b[2] + margin <= a[0] or a[3] + margin <= b[1] or b[3] + margin <= a[1])


def _place(rng, size, lo, hi, taken, cfg):
    """Integer pixel rectangle ``(x0, y0, x1, y1)`` not overlapping ``taken``."""
    for _ in range(cfg.max_tries):
        w = int(rng.integers(lo, hi + 1))
        h = int(rng.integers(lo, hi + 1))
        x0 = int(rng.integers(0, size - w + 1))
        y0 = int(rng.integers(0, size - h + 1))
        rect = (x0, y0, x0 + w, y0 + h)
        if not any(_overlaps(rect, t, 1) for t in taken):
            return rect
    raise RuntimeError(f"could not place a box after {cfg.max_tries} tries")


def _to_bbox(rect, size) -> BBox:
    x0, y0, x1, y1 = rect
    return BBox((x0 + x1) / 2 / size, (y0 + y1) / 2 / size, (x1 - x0) / size, (y1 - y0) / size)


def synth_scene(cfg: SynthConfig, index: int) -> Scene:
    """One synthetic scene; the RNG stream depends only on ``(seed, index)``."""
    rng = np.random.default_rng([cfg.seed, index])
    s = cfg.image_size
    img = np.full((s, s, 3), BACKGROUND, dtype=np.uint8)
    img += rng.integers(0, 8, size=(s, s, 1), dtype=np.uint8)
    taken: List[tuple] = []
    n_heads = int(rng.integers(cfg.heads[0], cfg.heads[1] + 1))
    n_objs = int(rng.integers(cfg.objects[0], cfg.objects[1] + 1))
    head_rects = []
    for _ in range(n_heads):
        r = _place(rng, s, s // 8, s // 6, taken, cfg)
        taken.append(r)
        head_rects.append(r)
    obj_rects, obj_labels = [], []
    for _ in range(n_objs):
        r = _place(rng, s, s // 8, s // 3, taken, cfg)
        taken.append(r)
        obj_rects.append(r)
        obj_labels.append(int(rng.integers(1, cfg.num_classes - 1)))

    depth = np.full((s, s), 0.5, dtype=np.float32)
    if cfg.depth_mode == "layered":
        depth = np.tile(np.linspace(1.0, 0.6, s, dtype=np.float32)[:, None], (1, s))
        bands = rng.permutation(len(taken))
        for k, (x0, y0, x1, y1) in zip(bands, taken):
            depth[y0:y1, x0:x1] = 0.05 + 0.5 * k / max(len(taken), 1)

    for (x0, y0, x1, y1), lab in zip(obj_rects, obj_labels):
        img[y0:y1, x0:x1] = CLASS_COLORS[lab]
    objects = [(_to_bbox(r, s), HEAD_LABEL) for r in head_rects]
    objects += [(_to_bbox(r, s), lab) for r, lab in zip(obj_rects, obj_labels)]

    gazes = []
    for hi, rect in enumerate(head_rects):
        hb = objects[hi][0]
        x0, y0, x1, y1 = rect
        img[y0:y1, x0:x1] = CLASS_COLORS[HEAD_LABEL]
        others = [b for k, (b, _) in enumerate(objects) if k != hi]
        if rng.random() < cfg.p_out:
            img[y0 + 1 : y0 + 3, x0 + 1 : x1 - 1] = (20, 20, 220)
            gazes.append(GazeAnnotation(hb, (), False))
            continue
        if others and rng.random() < cfg.p_gaze_object:
            tgt = others[int(rng.integers(len(others)))]
            p = (tgt.cx, tgt.cy)
        else:
            while True:
                p = (float(rng.uniform(0.02, 0.98)), float(rng.uniform(0.02, 0.98)))
                if math.hypot(p[0] - hb.cx, p[1] - hb.cy) > 0.1:
                    break
        points = [p]
        for _ in range(cfg.points_per_gaze - 1):
            j = rng.normal(0.0, cfg.point_jitter, size=2)
            points.append((float(np.clip(p[0] + j[0], 0, 1)), float(np.clip(p[1] + j[1], 0, 1))))
        # pupil mark offset toward the gaze point so the direction is visible
        ang = math.atan2(p[1] - hb.cy, p[0] - hb.cx)
        px = int(round((x0 + x1) / 2 - 1 + 0.3 * (x1 - x0) * math.cos(ang)))
        py = int(round((y0 + y1) / 2 - 1 + 0.3 * (y1 - y0) * math.sin(ang)))
        img[max(py, y0) : min(py + 2, y1), max(px, x0) : min(px + 2, x1)] = (10, 10, 10)
        gazes.append(GazeAnnotation(hb, tuple(points), True))

    pixels = (img.transpose(2, 0, 1).astype(np.float32) / 255.0)
    return Scene(
        image_id=f"synth_{cfg.seed}_{index:05d}",
        width=s,
        height=s,
        pixels=pixels,
        depth=depth,
        objects=tuple(objects),
        gazes=tuple(gazes),
    )


def generate_synthetic(cfg: SynthConfig, out_dir=None) -> List[Scene]:
    """Generate ``cfg.scenes`` scenes and, when ``out_dir`` is given, save them."""
    cfg.check()
    scenes = [synth_scene(cfg, i) for i in range(cfg.scenes)]
    if out_dir is not None:
        save_dataset(scenes, out_dir, manifest={"seed": cfg.seed, "synth": asdict(cfg)})
    return scenes


# -- disk layout -------------------------------------------------------------


def save_pixels(path, pixels: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr).save(path, format="PNG")


def load_pixels(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.transpose(2, 0, 1).astype(np.float32) / 255.0


def save_dataset(scenes: Sequence[Scene], out_dir, manifest: Optional[dict] = None) -> None:
    root = Path(out_dir)
    for sub in ("scenes", "images", "depth"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for sc in scenes:
        image = depth = None
        if sc.pixels is not None:
            image = f"images/{sc.image_id}.png"
            save_pixels(root / image, sc.pixels)
        if sc.depth is not None:
            depth = f"depth/{sc.image_id}.dgrd"
            write_grid(root / depth, sc.depth, DEPTH_MAGIC)
        save_scene_json(sc, root / "scenes" / f"{sc.image_id}.json", image, depth)
    info = {"schema_version": SCHEMA_VERSION, "count": len(scenes)}
    info.update(manifest or {})
    (root / "manifest.json").write_text(json.dumps(info, indent=1, sort_keys=True))


def load_dataset(data_dir) -> Tuple[List[Scene], List[Tuple[str, List[str]]]]:
    """Load every ``scenes/*.json`` under ``data_dir``.

    Returns the valid scenes and a rejects report of ``(file, violations)``.
    Unreadable or invalid files land in the report instead of being dropped.
    """
    root = Path(data_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    scenes: List[Scene] = []
    rejects: List[Tuple[str, List[str]]] = []
    for path in sorted((root / "scenes").glob("*.json")):
        try:
            d = json.loads(path.read_text())
            pixels = load_pixels(root / d["image"]) if d.get("image") else None
            depth = read_grid(root / d["depth"], DEPTH_MAGIC) if d.get("depth") else None
            sc = scene_from_dict(d, pixels, depth)
        except Exception as exc:
            rejects.append((path.name, [f"unreadable: {exc}"]))
            continue
        problems = validate_scene(sc)
        if problems:
            rejects.append((path.name, problems))
        else:
            scenes.append(sc)
    if rejects:
        log.warning("rejected %d scene files under %s", len(rejects), root)
    return scenes, rejects


def subsample_frames(
    scenes: Sequence[Scene],
    every: int = 5,
    seed: int = 0,
    clip_of: Callable[[Scene], str] = lambda sc: sc.image_id.rsplit("_", 1)[0],
) -> List[Scene]:
    """Keep one random frame from each run of ``every`` consecutive frames per clip."""
    rng = np.random.default_rng(seed)
    clips: Dict[str, List[Scene]] = {}
    for sc in sorted(scenes, key=lambda s: s.image_id):
        clips.setdefault(clip_of(sc), []).append(sc)
    kept = []
    for clip in sorted(clips):
        frames = clips[clip]
        for start in range(0, len(frames), every):
            chunk = frames[start : start + every]
            kept.append(chunk[int(rng.integers(len(chunk)))])
    return kept
