"""Command-line entry points: synth, train, eval, infer, viz.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import zipfile
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .config import RunConfig, load_config
from .data import generate_synthetic, load_dataset
from .metrics import summarize, write_audit_csv
from .scene import HEATMAP_MAGIC, read_grid
from .trainer import (
    NumericError,
    evaluate_checkpoint,
    load_checkpoint,
    predict_scenes,
    read_predictions,
    records_from_predictions,
    train,
    write_predictions,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# Overlay constants are fixed so renders are byte-reproducible.
OVERLAY_ALPHA = 0.6
HEAD_COLOR = (0, 255, 0)
OBJECT_COLOR = (255, 0, 0)
MARKER_COLOR = (255, 255, 255)
_CMAP_STOPS = np.array(
    [[0.0, 0, 0, 255], [0.35, 0, 255, 255], [0.65, 255, 255, 0], [1.0, 255, 0, 0]], dtype=np.float64
)

log = logging.getLogger("objgaze")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def colormap(values: np.ndarray) -> np.ndarray:
    """Piecewise-linear blue-cyan-yellow-red map of values in [0, 1] to RGB floats."""
    v = np.clip(values, 0.0, 1.0)
    return np.stack([np.interp(v, _CMAP_STOPS[:, 0], _CMAP_STOPS[:, c]) for c in (1, 2, 3)], axis=-1)


def _load_scenes(data_dir):
    try:
        scenes, rejects = load_dataset(data_dir)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc
    for name, problems in rejects:
        print(f"rejected {name}: {'; '.join(problems)}", file=sys.stderr)
    if not scenes:
        raise DataError(f"no valid scenes under {data_dir}")
    return scenes


def _config(args) -> RunConfig:
    try:
        return load_config(args.config)
    except (OSError, ValueError, TypeError) as exc:
        raise UsageError(f"bad config {args.config}: {exc}") from exc


# -- commands --------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _config(args)
    synth = cfg.synth
    overrides = {
        "scenes": args.n, "seed": args.seed, "image_size": args.image_size, "resolution": args.resolution,
        "p_out": args.p_out, "p_gaze_object": args.p_gaze_object, "depth_mode": args.depth_mode,
        "points_per_gaze": args.points,
    }
    synth = replace(synth, **{k: v for k, v in overrides.items() if v is not None})
    try:
        synth.check()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    try:
        scenes = generate_synthetic(synth, args.out)
    except RuntimeError as exc:
        raise DataError(str(exc)) from exc
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    tcfg = cfg.train
    overrides = {
        "lr": args.lr, "backbone_lr": args.backbone_lr, "epochs_main": args.epochs_main,
        "epochs_tail": args.epochs_tail, "batch_size": args.batch_size, "seed": args.seed,
        "max_steps": args.max_steps,
    }
    tcfg = replace(tcfg, **{k: v for k, v in overrides.items() if v is not None})
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs_main=args.epochs, epochs_tail=0)
    try:
        tcfg.check()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    scenes = _load_scenes(args.data)
    _, history = train(scenes, cfg.model, tcfg, args.out, cfg.loss)
    last = history[-1]["total"] if history else float("nan")
    print(f"trained {len(history)} steps; final loss {last:.6f}; checkpoint {Path(args.out) / 'last.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if (args.ckpt is None) == (args.pred is None):
        raise UsageError("give exactly one of --ckpt or --pred")
    scenes = _load_scenes(args.data)
    if args.ckpt is not None:
        try:
            report = evaluate_checkpoint(args.ckpt, scenes, args.heads, args.resolution)
        except (OSError, KeyError, zipfile.BadZipFile) as exc:
            raise DataError(f"cannot load checkpoint: {exc}") from exc
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        records = None
    else:
        try:
            preds = read_predictions(scenes, args.pred)
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"cannot read predictions: {exc}") from exc
        records = records_from_predictions(scenes, preds)
        report = summarize(records, len(scenes))
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    if args.csv:
        if records is None:
            model, _ = load_checkpoint(args.ckpt)
            records = records_from_predictions(scenes, predict_scenes(model, scenes, args.heads))
        write_audit_csv(records, args.csv)
    return EXIT_OK


def cmd_infer(args) -> int:
    scenes = _load_scenes(args.data)
    try:
        model, _ = load_checkpoint(args.ckpt)
    except (OSError, KeyError, zipfile.BadZipFile) as exc:
        raise DataError(f"cannot load checkpoint: {exc}") from exc
    preds = predict_scenes(model, scenes, args.heads)
    write_predictions(scenes, preds, args.out)
    print(f"wrote predictions for {len(scenes)} scenes to {args.out}")
    return EXIT_OK


def render_overlay(image: np.ndarray, heads: Sequence[dict], heatmaps: Sequence[Optional[np.ndarray]]) -> Image.Image:
    """Blend each head's upscaled heatmap, then draw boxes and the argmax marker.

    ``image`` is ``(H, W, 3)`` uint8. Per-pixel alpha is ``OVERLAY_ALPHA``
    times the heatmap value, so a zero heatmap leaves the pixels untouched.
    """
    h, w, _ = image.shape
    out = image.astype(np.float64)
    for grid in heatmaps:
        if grid is None:
            continue
        up = Image.fromarray(np.asarray(grid, dtype=np.float32), mode="F").resize((w, h), Image.BILINEAR)
        v = np.clip(np.asarray(up, dtype=np.float64), 0.0, 1.0)
        a = OVERLAY_ALPHA * v[..., None]
        out = out * (1.0 - a) + colormap(v) * a
    canvas = Image.fromarray(np.clip(np.rint(out), 0, 255).astype(np.uint8), mode="RGB")
    draw = ImageDraw.Draw(canvas)

    def rect(box, color):
        cx, cy, bw, bh = box
        draw.rectangle(
            [round((cx - bw / 2) * w), round((cy - bh / 2) * h), round((cx + bw / 2) * w) - 1, round((cy + bh / 2) * h) - 1],
            outline=color,
        )

    for head, grid in zip(heads, heatmaps):
        if head.get("query") is None:
            continue
        rect(head["head_bbox"], HEAD_COLOR)
        if head.get("gazed_object"):
            rect(head["gazed_object"]["bbox"], OBJECT_COLOR)
        if grid is not None and np.any(grid):
            x, y = marker_position(grid, w, h)
            draw.line([(x - 2, y), (x + 2, y)], fill=MARKER_COLOR)
            draw.line([(x, y - 2), (x, y + 2)], fill=MARKER_COLOR)
    return canvas


def marker_position(grid: np.ndarray, width: int, height: int):
    """Pixel holding the center of the heatmap's argmax cell."""
    r, c = np.unravel_index(int(np.argmax(grid)), grid.shape)
    return int((c + 0.5) * width / grid.shape[1]), int((r + 0.5) * height / grid.shape[0])


def cmd_viz(args) -> int:
    pred_path = Path(args.pred)
    try:
        pred = json.loads(pred_path.read_text())
        with Image.open(args.image) as im:
            image = np.asarray(im.convert("RGB"), dtype=np.uint8)
        heads = pred["heads"]
        if args.head is not None:
            heads = [h for h in heads if h["gt_index"] == args.head]
        grids = [
            read_grid(pred_path.parent / h["heatmap_file"], HEATMAP_MAGIC) if h.get("query") is not None else None
            for h in heads
        ]
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    render_overlay(image, heads, grids).save(args.out, format="PNG")
    print(f"wrote {args.out}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    p = _Parser(prog="objgaze", description="Object-aware gaze target detection.", formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset", formatter_class=fmt)
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--n", type=int, default=None, help="number of scenes (config default 20)")
    s.add_argument("--seed", type=int, default=None, help="generator seed (config default 0)")
    s.add_argument("--config", default=None, help="JSON run config; its 'synth' section seeds the defaults")
    s.add_argument("--image-size", type=int, default=None, help="square image side in pixels (default 64)")
    s.add_argument("--resolution", type=int, default=None, help="heatmap grid R (default 32)")
    s.add_argument("--p-out", type=float, default=None, help="out-of-frame probability (default 0.2)")
    s.add_argument("--p-gaze-object", type=float, default=None, help="gaze-at-object probability (default 0.8)")
    s.add_argument("--depth-mode", choices=("flat", "layered"), default=None, help="synthetic depth layout (default flat)")
    s.add_argument("--points", type=int, default=None, help="annotations per in-frame gaze (default 1)")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser(
        "train",
        help="train a model",
        formatter_class=fmt,
        description=(
            "Train with Adam. Defaults follow the published recipe: lr 1e-4 for 80 epochs, then lr/10 "
            "for 20 epochs; backbone lr ten times smaller (1e-5); loss weights lambda_giou 2.5, "
            "lambda_heat 2, other terms 1; head/object confidence threshold tau 0.5. Gradient "
            "clipping at norm 0.1, batch size 8, cone angle 120 degrees and the desk-scale model "
            "sizes are local choices. Every value can be overridden in the --config JSON."
        ),
    )
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="run directory for last.ckpt and train_log.jsonl")
    t.add_argument("--config", default=None, help="JSON run config (model/train/loss sections)")
    t.add_argument("--lr", type=float, default=None, help="learning rate (published: 1e-4)")
    t.add_argument("--backbone-lr", type=float, default=None, help="backbone learning rate (published: 1e-5, lr/10)")
    t.add_argument("--epochs-main", type=int, default=None, help="epochs at full lr (published: 80)")
    t.add_argument("--epochs-tail", type=int, default=None, help="epochs at lr/10 (published: 20)")
    t.add_argument("--epochs", type=int, default=None, help="shortcut: this many epochs at full lr and no tail")
    t.add_argument("--batch-size", type=int, default=None, help="batch size (default 8)")
    t.add_argument("--max-steps", type=int, default=None, help="stop after this many optimizer steps")
    t.add_argument("--seed", type=int, default=None, help="training seed (default 0)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or a prediction directory", formatter_class=fmt)
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--ckpt", default=None, help="checkpoint to run")
    e.add_argument("--pred", default=None, help="prediction directory written by 'infer'")
    e.add_argument("--heads", choices=("gt", "detected"), default="gt", help="head association protocol (default gt: annotated heads are matched to queries)")
    e.add_argument("--resolution", type=int, default=None, help="expected heatmap resolution of the checkpoint")
    e.add_argument("--out", default=None, help="write the JSON report here")
    e.add_argument("--csv", default=None, help="write a per-head audit CSV here")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="write prediction JSON and HMAP heatmaps", formatter_class=fmt)
    i.add_argument("--data", required=True, help="dataset directory")
    i.add_argument("--ckpt", required=True, help="checkpoint to run")
    i.add_argument("--out", required=True, help="prediction directory")
    i.add_argument("--heads", choices=("gt", "detected"), default="gt", help="head association protocol (default gt: annotated heads are matched to queries)")
    i.set_defaults(func=cmd_infer)

    v = sub.add_parser("viz", help="render a heatmap overlay PNG", formatter_class=fmt)
    v.add_argument("--pred", required=True, help="prediction JSON of one scene")
    v.add_argument("--image", required=True, help="scene image")
    v.add_argument("--out", required=True, help="output PNG")
    v.add_argument("--head", type=int, default=None, help="only this annotated head (all by default)")
    v.set_defaults(func=cmd_viz)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
