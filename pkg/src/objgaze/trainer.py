"""Optimization loop, checkpoints, inference and evaluation."""

from __future__ import annotations

import io
import json
import logging
import math
import random
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .losses import LossWeights, total_loss
from .metrics import EvalReport, HeadRecord, box_iou, select_gazed_object, summarize
from .model import GazeModel, ModelConfig, gt_head_index, match_scene, matched_selection, scene_targets, scenes_to_images
from .detector import to_predictions
from .losses import hungarian_match, matching_cost
from .scene import HEATMAP_MAGIC, BBox, Scene, read_grid, write_grid

log = logging.getLogger(__name__)

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


class NumericError(RuntimeError):
    """Raised when a loss term becomes non-finite."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    backbone_lr: float = 1e-5
    epochs_main: int = 80
    epochs_tail: int = 20  # trained at lr / 10
    batch_size: int = 8
    seed: int = 0
    deterministic: bool = True
    max_steps: Optional[int] = None
    grad_clip: float = 0.1
    train_selection: str = "matched"  # matched | threshold
    checkpoint_every: int = 1

    def check(self) -> None:
        if self.lr <= 0 or self.backbone_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.epochs_main < 0 or self.epochs_tail < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.train_selection not in ("matched", "threshold"):
            raise ValueError(f"unknown train_selection {self.train_selection!r}")


def set_deterministic(seed: int, enabled: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


# -- checkpoints ---------------------------------------------------------------


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(model: GazeModel, path, extra: Optional[dict] = None) -> None:
    """Zip archive of float32 ``.npy`` tensors keyed by parameter path plus ``config.json``."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        meta = {"model": model.cfg.to_dict(), **(extra or {})}
        _zip_write(zf, "config.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for name, tensor in model.state_dict().items():
            arr = tensor.detach().cpu().numpy().astype("<f4")
            npy = io.BytesIO()
            np.save(npy, arr, allow_pickle=False)
            _zip_write(zf, f"params/{name}.npy", npy.getvalue())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Tuple[GazeModel, dict]:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("config.json"))
        model = GazeModel(ModelConfig.from_dict(meta["model"]))
        state = {}
        for name in zf.namelist():
            if name.startswith("params/"):
                state[name[len("params/") : -len(".npy")]] = torch.from_numpy(np.load(io.BytesIO(zf.read(name))))
    model.load_state_dict(state)
    model.eval()
    return model, meta


# -- training ------------------------------------------------------------------


def make_optimizer(model: GazeModel, tcfg: TrainConfig) -> torch.optim.Adam:
    backbone = {id(p) for p in model.backbone_parameters()}
    rest = [p for p in model.parameters() if id(p) not in backbone]
    return torch.optim.Adam(
        [
            {"params": model.backbone_parameters(), "lr": tcfg.backbone_lr, "base_lr": tcfg.backbone_lr},
            {"params": rest, "lr": tcfg.lr, "base_lr": tcfg.lr},
        ]
    )


def lr_factor(epoch: int, tcfg: TrainConfig) -> float:
    return 1.0 if epoch < tcfg.epochs_main else 0.1


def _depths(batch: Sequence[Scene]):
    return [sc.depth for sc in batch]


def batch_loss(model: GazeModel, batch: Sequence[Scene], w: LossWeights, selection_mode: str = "matched"):
    """Mean per-scene objective over a batch and the mean per-term breakdown."""
    dtype = next(model.parameters()).dtype
    images = scenes_to_images(batch, dtype)
    targets = [scene_targets(sc, model.cfg) for sc in batch]
    det = model.detector(images)
    assignments = [match_scene(det["logits"][k], det["boxes"][k], t, w) for k, t in enumerate(targets)]
    selection = None
    if selection_mode == "matched":
        selection = matched_selection(assignments, targets, model.cfg.detector.num_queries)
    out = model.gaze_forward(det, _depths(batch), selection)
    total = 0.0
    terms: Dict[str, float] = {}
    for k, (t, a) in enumerate(zip(targets, assignments)):
        loss, parts = total_loss(out, t, a, w, b=k)
        total = total + loss
        for name, v in parts.items():
            terms[name] = terms.get(name, 0.0) + v / len(batch)
    return total / len(batch), terms


def _batches(n: int, size: int, rng: np.random.Generator) -> Iterator[List[int]]:
    order = rng.permutation(n)
    for start in range(0, n, size):
        yield order[start : start + size].tolist()


def train(
    scenes: Sequence[Scene],
    model_cfg: ModelConfig,
    tcfg: TrainConfig,
    out_dir=None,
    weights: Optional[LossWeights] = None,
    model: Optional[GazeModel] = None,
) -> Tuple[GazeModel, List[dict]]:
    """Train with Adam; the backbone group steps at its own (smaller) rate.

    Writes ``last.ckpt`` every ``checkpoint_every`` epochs and ``train_log.jsonl``
    into ``out_dir`` when given. Returns the model and the per-step log.
    """
    if not scenes:
        raise ValueError("training needs a non-empty dataset")
    tcfg.check()
    w = weights or LossWeights()
    w.check()
    set_deterministic(tcfg.seed, tcfg.deterministic)
    model = model or GazeModel(model_cfg)
    model.train()
    opt = make_optimizer(model, tcfg)
    rng = np.random.default_rng(tcfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_log.jsonl").write_text("")
        save_checkpoint(model, out / "last.ckpt", {"train": asdict(tcfg), "epoch": 0})
    history: List[dict] = []
    step = 0
    epochs = tcfg.epochs_main + tcfg.epochs_tail
    for epoch in range(epochs):
        for group in opt.param_groups:
            group["lr"] = group["base_lr"] * lr_factor(epoch, tcfg)
        for idx in _batches(len(scenes), tcfg.batch_size, rng):
            if tcfg.max_steps is not None and step >= tcfg.max_steps:
                break
            loss, terms = batch_loss(model, [scenes[i] for i in idx], w, tcfg.train_selection)
            bad = [k for k, v in terms.items() if not math.isfinite(v)]
            if bad or not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at step {step}: {', '.join(bad) or 'total'}")
            opt.zero_grad()
            loss.backward()
            if tcfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), tcfg.grad_clip)
            opt.step()
            rec = {"step": step, "epoch": epoch, "lr": opt.param_groups[1]["lr"], "total": float(loss.detach()), **terms}
            history.append(rec)
            if out is not None:
                with open(out / "train_log.jsonl", "a") as fh:
                    fh.write(json.dumps(rec) + "\n")
            step += 1
        if out is not None and ((epoch + 1) % tcfg.checkpoint_every == 0 or epoch + 1 == epochs):
            save_checkpoint(model, out / "last.ckpt", {"train": asdict(tcfg), "epoch": epoch + 1})
        if tcfg.max_steps is not None and step >= tcfg.max_steps:
            if out is not None:
                save_checkpoint(model, out / "last.ckpt", {"train": asdict(tcfg), "epoch": epoch + 1})
            break
    model.eval()
    return model, history


# -- inference -----------------------------------------------------------------


def _gazed_gt(scene: Scene, gaze_idx: int) -> Optional[Tuple[BBox, int]]:
    """Smallest annotated object (other than the gazer) containing the mean gaze point."""
    g = scene.gazes[gaze_idx]
    if not g.inside:
        return None
    x, y = g.mean_point()
    own = gt_head_index(scene, gaze_idx)
    hits = [(b.w * b.h, k) for k, (b, _) in enumerate(scene.objects) if k != own and b.contains(x, y)]
    if not hits:
        return None
    _, k = min(hits)
    return scene.objects[k]


@torch.no_grad()
def predict_scenes(model: GazeModel, scenes: Sequence[Scene], heads: str = "gt", w: Optional[LossWeights] = None):
    """Per-scene lists of head predictions, one entry per annotated gaze.

    ``heads="gt"`` assigns annotated heads to queries by matching and forces
    those queries into the head set; ``"detected"`` uses the confidence rule
    and pairs annotated heads with detected heads by box IoU.
    """
    model.eval()
    w = w or LossWeights()
    dtype = next(model.parameters()).dtype
    results = []
    for sc in scenes:
        images = scenes_to_images([sc], dtype)
        det = model.detector(images)
        is_head, keep = model.threshold_selection(det["logits"])
        preds = to_predictions(det["logits"][0], det["boxes"][0])
        head_of_gaze: Dict[int, int] = {}
        if heads == "gt":
            if sc.gazes:
                t = scene_targets(sc, model.cfg)
                head_objs = [g for g, _ in t.heads]
                sub_labels = t.labels[head_objs]
                sub_boxes = t.boxes[head_objs]
                a = hungarian_match(matching_cost(det["logits"][0], det["boxes"][0], sub_labels, sub_boxes, w))
                is_head = torch.zeros_like(is_head)
                for p, g in a.pairs:
                    is_head[0, p] = True
                    head_of_gaze[g] = p
                keep = keep | is_head
        elif heads == "detected":
            cand = torch.nonzero(is_head[0]).flatten().tolist()
            if cand and sc.gazes:
                cost = np.array([[-box_iou(preds[q].bbox, g.head_bbox) for g in sc.gazes] for q in cand])
                if len(cand) >= len(sc.gazes):
                    a = hungarian_match(cost)
                    pairs = a.pairs
                else:
                    a = hungarian_match(cost.T)
                    pairs = [(g, q) for q, g in a.pairs]
                for q, g in pairs:
                    if cost[q, g] < 0:
                        head_of_gaze[g] = cand[q]
        else:
            raise ValueError(f"unknown head mode {heads!r}")
        out = model.gaze_forward(det, [sc.depth], (is_head, keep))
        heat = out["heatmaps"][0].float().numpy()
        p_out = out["p_out"][0].double().numpy()
        skip = out["skip"][0].numpy()
        sigma = out["sigma"][0].double().numpy()
        kept = torch.nonzero(keep[0]).flatten().tolist()
        entries = []
        for gi in range(len(sc.gazes)):
            q = head_of_gaze.get(gi)
            if q is None:
                entries.append({"gt_index": gi, "query": None})
                continue
            grid = heat[q]
            r, c = np.unravel_index(int(np.argmax(grid)), grid.shape)
            point = ((c + 0.5) / grid.shape[1], (r + 0.5) / grid.shape[0])
            j = select_gazed_object(preds, [k for k in kept if k != q], point, sigma[q])
            gazed = None if j is None else {"bbox": preds[j].bbox.as_list(), "label": preds[j].label, "confidence": preds[j].confidence}
            entries.append(
                {
                    "gt_index": gi,
                    "query": q,
                    "head_bbox": preds[q].bbox.as_list(),
                    "p_out": float(p_out[q]),
                    "gaze_point": [float(point[0]), float(point[1])],
                    "used_skip": bool(skip[q]),
                    "gazed_object": gazed,
                    "heatmap": grid,
                }
            )
        results.append(entries)
    return results


def records_from_predictions(scenes: Sequence[Scene], predictions) -> List[HeadRecord]:
    records = []
    for sc, entries in zip(scenes, predictions):
        by_gt = {e["gt_index"]: e for e in entries}
        for gi, g in enumerate(sc.gazes):
            e = by_gt.get(gi, {"query": None})
            found = e.get("query") is not None
            gazed = e.get("gazed_object") if found else None
            records.append(
                HeadRecord(
                    image_id=sc.image_id,
                    head_bbox=g.head_bbox,
                    gt_points=list(g.points),
                    gt_out=not g.inside,
                    heatmap=e["heatmap"] if found else None,
                    p_out=e["p_out"] if found else None,
                    used_skip=e["used_skip"] if found else None,
                    gazed_pred=None if gazed is None else (BBox.from_list(gazed["bbox"]), gazed["label"], gazed["confidence"]),
                    gazed_gt=_gazed_gt(sc, gi),
                )
            )
    return records


def evaluate(model: GazeModel, scenes: Sequence[Scene], heads: str = "gt") -> EvalReport:
    if not scenes:
        raise ValueError("evaluation needs a non-empty dataset")
    preds = predict_scenes(model, scenes, heads)
    return summarize(records_from_predictions(scenes, preds), len(scenes))


def evaluate_checkpoint(path, scenes: Sequence[Scene], heads: str = "gt", resolution: Optional[int] = None) -> EvalReport:
    model, _ = load_checkpoint(path)
    if resolution is not None and resolution != model.cfg.got.resolution:
        raise ValueError(f"checkpoint resolution {model.cfg.got.resolution} differs from requested {resolution}")
    return evaluate(model, scenes, heads)


# -- prediction files ----------------------------------------------------------


def write_predictions(scenes: Sequence[Scene], predictions, out_dir) -> None:
    """One JSON per scene plus an ``HMAP`` grid per predicted head."""
    root = Path(out_dir)
    (root / "heatmaps").mkdir(parents=True, exist_ok=True)
    for sc, entries in zip(scenes, predictions):
        heads = []
        for e in entries:
            if e.get("query") is None:
                heads.append({"gt_index": e["gt_index"], "query": None})
                continue
            name = f"heatmaps/{sc.image_id}_{e['gt_index']}.hmap"
            write_grid(root / name, e["heatmap"], HEATMAP_MAGIC)
            heads.append({k: v for k, v in e.items() if k != "heatmap"} | {"heatmap_file": name})
        (root / f"{sc.image_id}.json").write_text(json.dumps({"image_id": sc.image_id, "heads": heads}, indent=1))


def read_predictions(scenes: Sequence[Scene], pred_dir):
    root = Path(pred_dir)
    out = []
    for sc in scenes:
        d = json.loads((root / f"{sc.image_id}.json").read_text())
        entries = []
        for e in d["heads"]:
            if e.get("query") is not None:
                e = dict(e, heatmap=read_grid(root / e["heatmap_file"], HEATMAP_MAGIC))
            entries.append(e)
        out.append(entries)
    return out
