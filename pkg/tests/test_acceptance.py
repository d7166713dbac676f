"""Acceptance suite: one test per criterion, each at its stated tolerance.

A summary line per criterion is printed at the end of the run (see conftest).
"""

import io
import itertools
import json
import math
import time
import zipfile

import numpy as np
import pytest
import torch

from objgaze.attention import biased_attention
from objgaze.cli import render_overlay
from objgaze.cone import build_cone, conditioned_cosine, scene_score_matrix
from objgaze.data import SynthConfig, generate_synthetic, load_dataset, save_dataset
from objgaze.detector import DetectorConfig
from objgaze.got import GazeObjectTransformer, GotConfig
from objgaze.losses import (
    Assignment,
    GazeTarget,
    LossWeights,
    SceneTargets,
    giou,
    hungarian_match,
    l_box,
    l_cls,
    l_heat,
    l_out,
    l_vec,
    total_loss,
)
from objgaze.metrics import DECILES, auc, average_precision, retained_points, variance_decile_auc
from objgaze.model import GazeModel, ModelConfig
from objgaze.scene import DEPTH_MAGIC, HEATMAP_MAGIC, BBox, GazeVector, ObjectPrediction, decode_grid, encode_grid
from objgaze.trainer import (
    TrainConfig,
    evaluate,
    load_checkpoint,
    predict_scenes,
    read_predictions,
    save_checkpoint,
    set_deterministic,
    train,
    write_predictions,
)


# -- shared oracles ------------------------------------------------------------------


def oracle_direction(theta, phi, mode):
    if mode == "2d":
        return (math.cos(phi), -math.sin(phi))
    return (math.sin(theta) * math.cos(phi), -math.sin(theta) * math.sin(phi), math.cos(theta))


def oracle_cell(apex, cell, direction, alpha):
    off = [c - a for c, a in zip(cell, apex)]
    n_off = math.sqrt(sum(o * o for o in off))
    if n_off == 0:
        return 0.0
    n_dir = math.sqrt(sum(d * d for d in direction))
    c = max(-1.0, min(1.0, sum(o * d for o, d in zip(off, direction)) / (n_off * n_dir)))
    return c if math.degrees(math.acos(c)) <= alpha / 2 + 1e-9 else 0.0


def oracle_cosine(off, direction, alpha):
    """Plain-float cosine with the cone test; components accumulate left to right."""
    dot = sum(o * d for o, d in zip(off, direction))
    c = dot / (math.sqrt(sum(o * o for o in off)) * math.sqrt(sum(d * d for d in direction)))
    c = max(-1.0, min(1.0, c))
    return c if c >= math.cos(math.radians(alpha) / 2) - 1e-12 else 0.0


def grid_cell(v, n):
    return min(max(math.floor(v * n), 0), n - 1)


def fd_rel_error(fn, x, h=1e-6):
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.clone().view(-1)
    flat = x.detach().view(-1)
    numeric = torch.zeros_like(flat)
    for k in range(flat.numel()):
        up, down = flat.clone(), flat.clone()
        up[k] += h
        down[k] -= h
        numeric[k] = (fn(up.view_as(x)) - fn(down.view_as(x))).item() / (2 * h)
    return float((analytic - numeric).norm() / max(numeric.norm().item(), 1e-12))


# -- 1. cone oracle ------------------------------------------------------------------


def test_criterion_1_cone_oracle(record_property):
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for k in range(200):
        mode = "3d" if k % 2 else "2d"
        n = 2 if mode == "2d" else 3
        dims = (32,) * n if k < 2 else tuple(int(v) for v in rng.integers(2, 33, n))
        apex = tuple(int(rng.integers(0, d)) for d in dims)
        alpha = float(rng.uniform(1.0, 180.0))
        theta, phi = float(rng.uniform(0, math.pi)), float(rng.uniform(-math.pi, math.pi))
        if mode == "2d":
            theta = math.pi / 2
        cone = build_cone(apex, GazeVector(theta, phi, 1.0), dims, alpha, mode)
        d = oracle_direction(theta, phi, mode)
        for cell in itertools.product(*(range(s) for s in dims)):
            got = cone.value_at(*cell)
            worst = max(worst, abs(got - oracle_cell(apex, cell, d, alpha)))
    elapsed = time.perf_counter() - start
    # cells exactly on the boundary: 45 degree diagonal of a 90 degree cone, and a 60 degree ray
    diag = build_cone((0, 0), GazeVector(math.pi / 2, 0.0, 1.0), (16, 16), 90.0)
    on_edge = all(diag.value_at(t, t) == pytest.approx(math.sqrt(0.5)) for t in range(1, 16))
    ray = (math.cos(math.radians(60)), math.sin(math.radians(60)))
    inclusive = conditioned_cosine((1.0, 0.0), ray, 120.0) == pytest.approx(0.5)
    record_property("detail", f"max |field - oracle| = {worst:.2e} over 200 configs in {elapsed:.1f}s")
    assert worst <= 1e-6
    assert on_edge and inclusive
    assert elapsed < 60


# -- 2. score matrix -----------------------------------------------------------------


def test_criterion_2_score_matrix(record_property):
    rng = np.random.default_rng(202)
    mismatches = 0
    for k in range(500):
        mode = "3d" if k % 4 == 3 else "2d"
        R = int(rng.integers(4, 33))
        bins = int(rng.integers(2, 17))
        n = int(rng.integers(1, 9))
        n_heads = int(rng.integers(0, n + 1))
        alpha = float(rng.uniform(10, 180))
        preds = [
            ObjectPrediction(BBox(*rng.uniform(0, 1, 2), 0.1, 0.1), 0 if i < n_heads else 1, 0.9) for i in range(n)
        ]
        heads = list(range(n_heads))
        gazes = {
            i: GazeVector(float(rng.uniform(0, math.pi)) if mode == "3d" else math.pi / 2,
                          float(rng.uniform(-math.pi, math.pi)), 1.0)
            for i in heads
        }
        depth = rng.random((R, R)) if mode == "3d" else None
        sm = scene_score_matrix(preds, heads, gazes, R, alpha, mode, depth, bins)

        def cell(p):
            c = (grid_cell(p.bbox.cx, R), grid_cell(p.bbox.cy, R))
            if mode == "3d":
                c += (grid_cell(depth[c[1], c[0]], bins),)
            return c

        for i in range(n):
            for j in range(n):
                if i not in heads or i == j:
                    want = 0.0
                else:
                    apex, target = cell(preds[i]), cell(preds[j])
                    off = [t - a for t, a in zip(target, apex)]
                    want = 0.0
                    if any(off):
                        want = oracle_cosine(off, oracle_direction(gazes[i].theta, gazes[i].phi, mode), alpha)
                if sm.sigma[i, j] != want:
                    mismatches += 1
        nz = sm.sigma[sm.sigma != 0]
        assert np.all(nz >= math.cos(math.radians(alpha / 2)) - 1e-12) and np.all(nz <= 1.0 + 1e-12)
        assert not sm.sigma[n_heads:].any()
    # equal depth: 3D matrix equals the 2D one
    worst3 = 0.0
    for _ in range(50):
        R = 16
        preds = [ObjectPrediction(BBox(*rng.uniform(0, 1, 2), 0.1, 0.1), 0 if i < 2 else 1, 0.9) for i in range(6)]
        gazes = {i: GazeVector(math.pi / 2, float(rng.uniform(-math.pi, math.pi)), 1.0) for i in range(2)}
        flat = scene_score_matrix(preds, [0, 1], gazes, R)
        deep = scene_score_matrix(preds, [0, 1], gazes, R, mode="3d", depth=np.full((R, R), 0.4), depth_bins=R)
        worst3 = max(worst3, float(np.abs(flat.sigma - deep.sigma).max()))
    record_property("detail", f"{mismatches} inexact entries over 500 configs; 3D-vs-2D max diff {worst3:.1e}")
    assert mismatches == 0
    assert worst3 <= 1e-6


# -- 3. attention --------------------------------------------------------------------


def test_criterion_3_attention(record_property):
    rng = np.random.default_rng(303)
    worst = 0.0
    for _ in range(100):
        q, k, v = (torch.as_tensor(rng.standard_normal(s), dtype=torch.float32) for s in ((4, 8), (6, 8), (6, 3)))
        biased, _ = biased_attention(q, k, v, torch.zeros(4, 6))
        standard = torch.softmax(q @ k.T / math.sqrt(8), dim=-1) @ v
        worst = max(worst, float((biased - standard).abs().max()))
    masked_ok = True
    for _ in range(100):
        q, k, v = (torch.as_tensor(rng.standard_normal(s)) for s in ((3, 4), (5, 4), (5, 2)))
        mask = torch.as_tensor(rng.random((3, 5)) < 0.4)
        mask[:, int(rng.integers(5))] = False
        _, w = biased_attention(q, k, v, torch.as_tensor(rng.random((3, 5))), mask)
        masked_ok &= bool(torch.all(w[mask] == 0))
    violations = 0
    for _ in range(1000):
        n_k = int(rng.integers(2, 10))
        q, k, v = (torch.as_tensor(rng.standard_normal(s)) for s in ((1, 4), (n_k, 4), (n_k, 2)))
        subset = torch.as_tensor(rng.random(n_k) < 0.5)
        bias = torch.where(subset, torch.as_tensor(rng.random(n_k) * 4), torch.zeros(n_k))[None]
        w0 = biased_attention(q, k, v)[1][0, subset].sum()
        w1 = biased_attention(q, k, v, bias)[1][0, subset].sum()
        violations += int(w1 < w0 - 1e-12)
    d_k = 16
    _, w = biased_attention(
        torch.zeros(1, d_k, dtype=torch.float64),
        torch.as_tensor(rng.standard_normal((2, d_k))),
        torch.eye(2, dtype=torch.float64),
        torch.tensor([[math.sqrt(d_k) * math.log(2), 0.0]], dtype=torch.float64),
    )
    two_key = np.allclose(w.numpy(), [[2 / 3, 1 / 3]], atol=1e-12, rtol=0)
    record_property("detail", f"zero-bias max diff {worst:.1e}; monotonicity violations {violations}/1000")
    assert worst <= 1e-7
    assert masked_ok and violations == 0 and two_key


# -- 4. matching ---------------------------------------------------------------------


def test_criterion_4_matching(record_property):
    rng = np.random.default_rng(404)
    wrong = 0
    for k in range(1000):
        g = int(rng.integers(1, 7))
        p = int(rng.integers(g, 7))
        cost = rng.integers(0, 5, (p, g)).astype(float) if k % 5 == 0 else rng.standard_normal((p, g))
        a = hungarian_match(cost)
        assert sorted(c for _, c in a.pairs) == list(range(g))
        got = sum(cost[r, c] for r, c in sorted(a.pairs, key=lambda rc: rc[1]))
        best = min(sum(cost[rows[c], c] for c in range(g)) for rows in itertools.permutations(range(p), g))
        wrong += int(got != best)
    record_property("detail", f"{wrong}/1000 non-optimal assignments")
    assert wrong == 0


# -- 5. losses and gradients ---------------------------------------------------------


def test_criterion_5_losses_gradients(record_property):
    rng = np.random.default_rng(505)
    w = LossWeights()
    f64 = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64))
    gt_box = f64([0.4, 0.5, 0.2, 0.3])
    target = f64(rng.random((4, 4)))
    gvec = f64(rng.standard_normal(3))
    errs = {
        "l_box": fd_rel_error(lambda p: l_box(p, gt_box, w), f64([0.47, 0.55, 0.25, 0.21])),
        "l_cls": fd_rel_error(lambda z: l_cls(z, [0, 3, 1], w.eos_weight), f64(rng.standard_normal((3, 4)))),
        "l_vec": fd_rel_error(lambda z: l_vec(z, gvec), f64(rng.standard_normal(3))),
        "l_out": fd_rel_error(lambda p: l_out(p, 1).sum() + l_out(p, 0).sum(), f64([0.2, 0.7])),
        "l_heat": fd_rel_error(lambda p: l_heat(p, target, w.lambda_heat), f64(rng.random((4, 4)))),
    }
    tgt = SceneTargets(
        labels=np.array([0, 1]), boxes=np.array([[0.3, 0.3, 0.2, 0.2], [0.6, 0.6, 0.3, 0.2]]),
        heads=[(0, GazeTarget(False, (1.5, 0.3, 4.0), rng.random((4, 4))))],
    )
    base = {
        "logits": f64(rng.standard_normal((1, 3, 3))),
        "boxes": f64(rng.uniform(0.25, 0.6, (1, 3, 4))),
        "gaze": f64(rng.standard_normal((1, 3, 3))),
        "heatmaps": f64(rng.random((1, 3, 4, 4))),
        "p_out": f64(rng.uniform(0.2, 0.8, (1, 3))),
    }
    assign = Assignment([(1, 0), (2, 1)], [0])
    for key in base:
        errs[f"total[{key}]"] = fd_rel_error(lambda x, key=key: total_loss({**base, key: x}, tgt, assign, w)[0], base[key])
    e2e = _end_to_end_fd()
    identical = l_box(gt_box, gt_box, w).item()
    hand = (
        giou(BBox(0.5, 0.5, 1, 1), BBox(1.5, 1.5, 1, 1)),
        giou(BBox(1, 1, 2, 2), BBox(1.5, 1.5, 1, 1)),
        giou(BBox(0.5, 0.5, 1, 1), BBox(0.5, 0.5, 1, 1)),
    )
    worst = max(errs, key=errs.get)
    record_property(
        "detail",
        f"worst per-loss rel err {errs[worst]:.1e} ({worst}); end-to-end {e2e:.1e}; l_box(identical) {identical}; giou {hand}",
    )
    assert all(v < 1e-4 for v in errs.values()), errs
    assert e2e < 1e-3
    assert identical == -2.5
    assert hand == (-0.5, 0.25, 1.0)


def _end_to_end_fd():
    from objgaze.data import synth_scene
    from objgaze.trainer import batch_loss

    torch.manual_seed(0)
    cfg = ModelConfig(
        detector=DetectorConfig(stage_channels=(4, 8), dim=8, enc_layers=1, dec_layers=1, enc_heads=2, dec_heads=2,
                                ffn_dim=16, num_queries=6, mlp_hidden=8, image_size=16),
        got=GotConfig(layers=1, heads=2, dim=8, ffn_dim=16, resolution=4, heatmap_hidden=8),
        gaze_hidden=8,
    )
    model = GazeModel(cfg).double()
    scenes = [synth_scene(SynthConfig(seed=s, image_size=16, resolution=4, objects=(1, 2), heads=(1, 2), p_out=0.3), 0)
              for s in range(2)]
    w = LossWeights()
    model.zero_grad()
    batch_loss(model, scenes, w)[0].backward()
    rng = np.random.default_rng(0)
    analytic, numeric = [], []
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.grad is None or not p.grad.any():
                continue
            for k in rng.choice(p.numel(), size=min(3, p.numel()), replace=False):
                flat = p.view(-1)
                orig = flat[k].item()
                flat[k] = orig + 1e-6
                up = batch_loss(model, scenes, w)[0].item()
                flat[k] = orig - 1e-6
                down = batch_loss(model, scenes, w)[0].item()
                flat[k] = orig
                numeric.append((up - down) / 2e-6)
                analytic.append(p.grad.view(-1)[k].item())
    analytic, numeric = np.array(analytic), np.array(numeric)
    return float(np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric))


# -- 6. metrics ----------------------------------------------------------------------


def _pairwise_auc(pred, points):
    R = pred.shape[0]
    pos = {(grid_cell(y, R), grid_cell(x, R)) for x, y in points}
    p = [pred[c] for c in pos]
    n = [pred[i, j] for i in range(R) for j in range(R) if (i, j) not in pos]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in p for b in n)
    return wins / (len(p) * len(n))


def _brute_ap(scores, labels, n_pos):
    pts = [(0.0, 1.0)]
    for t in sorted(set(scores), reverse=True):
        sel = [l for s, l in zip(scores, labels) if s >= t]
        pts.append((sum(sel) / n_pos, sum(sel) / len(sel)))
    return sum((pts[k][0] - pts[k - 1][0]) * max(p for _, p in pts[k:]) for k in range(1, len(pts)))


def test_criterion_6_metrics(record_property):
    rng = np.random.default_rng(606)
    auc_bad = 0
    for k in range(500):
        pred = rng.random((16, 16))
        if k % 4 == 0:
            pred = np.round(pred, 1)
        pts = [tuple(rng.random(2)) for _ in range(int(rng.integers(1, 6)))]
        auc_bad += int(auc(pred, pts) != _pairwise_auc(pred, pts))
    constant = auc(np.full((16, 16), 0.7), [(0.3, 0.4)])
    ap_worst = 0.0
    for _ in range(300):
        n = int(rng.integers(1, 20))
        scores = list(np.round(rng.random(n), 1))
        labels = [bool(v) for v in rng.random(n) < 0.4]
        labels[0] = True
        n_pos = sum(labels) + int(rng.integers(0, 3))
        ap_worst = max(ap_worst, abs(average_precision(scores, labels, n_pos) - _brute_ap(scores, labels, n_pos)))
    decile_bad = 0
    for _ in range(50):
        gazes = [[tuple(rng.random(2)) for _ in range(int(rng.integers(1, 8)))] for _ in range(int(rng.integers(2, 6)))]
        dists = [[math.dist(p, tuple(np.mean(g, axis=0))) for p in g] for g in gazes]
        pooled = sorted(d for ds in dists for d in ds)
        for f in DECILES:
            thr = pooled[max(math.ceil(f * len(pooled)) - 1, 0)]
            want = [[p for p, d in zip(g, ds) if d <= thr] for g, ds in zip(gazes, dists)]
            decile_bad += int(retained_points(gazes, f) != want)
        heat = [rng.random((16, 16)) for _ in gazes]
        plain = [auc(h, g) for h, g in zip(heat, gazes)]
        plain = float(np.mean([v for v in plain if v is not None]))
        decile_bad += int(variance_decile_auc(heat, gazes, 1.0) != plain)
    record_property(
        "detail",
        f"AUC mismatches {auc_bad}/500; constant AUC {constant}; AP max diff {ap_worst:.1e}; decile mismatches {decile_bad}",
    )
    assert auc_bad == 0 and constant == 0.5
    assert ap_worst <= 1e-12
    assert decile_bad == 0


# -- 7. gate and skip ----------------------------------------------------------------


def test_criterion_7_gate_skip(record_property):
    torch.manual_seed(7)
    cfg = GotConfig(layers=2, heads=2, dim=8, ffn_dim=16, resolution=8, heatmap_hidden=16)
    got = GazeObjectTransformer(cfg, 5).double()
    f_d = torch.randn(1, 5, 8, dtype=torch.float64)
    is_head = torch.tensor([[True, True, False, False, False]])
    keep = torch.ones(1, 5, dtype=torch.bool)
    sigma = torch.zeros(1, 5, 5, dtype=torch.float64)
    sigma[0, 1, 3] = 0.8  # head 0 sees nothing, head 1 sees object 3
    base = got(f_d, sigma, is_head, keep)
    skip_flags = base["skip"][0, :2].tolist()

    def perturbed(module):
        clone = GazeObjectTransformer(cfg, 5).double()
        clone.load_state_dict(got.state_dict())
        with torch.no_grad():
            getattr(clone, module).layers[-1].bias.add_(0.25)
        return clone(f_d, sigma, is_head, keep)["heatmaps"][0]

    no_obj = perturbed("heatmap_no_object")
    obj = perturbed("heatmap_head")
    h = base["heatmaps"][0]
    routes = (
        not torch.equal(no_obj[0], h[0]) and torch.equal(obj[0], h[0]),  # skip row follows the no-object head only
        torch.equal(no_obj[1], h[1]) and not torch.equal(obj[1], h[1]),  # object row follows the object path only
    )
    valid = bool(torch.isfinite(h[0]).all() and (h[0] >= 0).all() and (h[0] <= 1).all() and h[0].shape == (8, 8))
    p = base["p_out"][0, 0].item()
    record_property("detail", f"skip flags {skip_flags}; routing {routes}; empty-cone head p_out {p:.3f}")
    assert skip_flags == [True, False]
    assert all(routes)
    assert valid and 0 < p < 1


# -- 8. overfit smoke test -----------------------------------------------------------

SMOKE_STEPS = 2000


def smoke_config(use_cone=True):
    # desk-scale: three backbone stages (8x8 tokens) and a 1e-3 learning rate
    return ModelConfig(detector=DetectorConfig(stage_channels=(16, 32, 64)), got=GotConfig(use_cone=use_cone))


def smoke_train_config(max_steps=SMOKE_STEPS):
    return TrainConfig(lr=1e-3, backbone_lr=1e-4, epochs_main=10_000, epochs_tail=0, max_steps=max_steps)


@pytest.fixture(scope="module")
def smoke_scenes():
    return generate_synthetic(SynthConfig(seed=0, scenes=20))


def test_criterion_8_overfit_smoke(record_property, smoke_scenes):
    start = time.perf_counter()
    set_deterministic(0)
    untrained = evaluate(GazeModel(smoke_config()), smoke_scenes)
    model, hist = train(smoke_scenes, smoke_config(), smoke_train_config())
    rep = evaluate(model, smoke_scenes)
    ablated_model, _ = train(smoke_scenes, smoke_config(use_cone=False), smoke_train_config())
    ablated = evaluate(ablated_model, smoke_scenes)
    elapsed = time.perf_counter() - start
    first = np.mean([h["total"] for h in hist[:30]])
    last = np.mean([h["total"] for h in hist[-30:]])
    record_property(
        "detail",
        f"{len(hist)} steps; avg dist {rep.avg_dist:.4f}; io AP {rep.io_ap}; AUC {rep.auc:.4f}; "
        f"untrained AUC {untrained.auc:.4f}; ablation AUC {ablated.auc:.4f} dist {ablated.avg_dist:.4f} "
        f"io AP {ablated.io_ap}; loss {first:.2f} -> {last:.2f}; {elapsed:.0f}s",
    )
    assert len(hist) <= SMOKE_STEPS
    assert rep.avg_dist < 0.05
    assert rep.io_ap == 1.0
    assert rep.auc > 0.95
    assert 0.4 <= untrained.auc <= 0.6
    assert last < first
    assert ablated.avg_dist < 0.05 and ablated.auc > 0.95 and ablated.io_ap == 1.0
    assert elapsed < 600


# -- 9. reproducibility --------------------------------------------------------------


def _artifacts(tmp, scenes):
    model, _ = train(scenes, smoke_config(), smoke_train_config(60), tmp / "run")
    report = evaluate(model, scenes).to_json()
    preds = predict_scenes(model, scenes)
    write_predictions(scenes, preds, tmp / "pred")
    sc = scenes[0]
    image = np.clip(np.rint(sc.pixels * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    pred = json.loads((tmp / "pred" / f"{sc.image_id}.json").read_text())
    grids = [e.get("heatmap") for e in read_predictions([sc], tmp / "pred")[0]]
    buf = io.BytesIO()
    render_overlay(image, pred["heads"], grids).save(buf, format="PNG")
    return (tmp / "run" / "last.ckpt").read_bytes(), report, buf.getvalue()


def test_criterion_9_reproducibility(record_property, smoke_scenes, tmp_path):
    scenes = smoke_scenes[:8]
    a = _artifacts(tmp_path / "a", scenes)
    b = _artifacts(tmp_path / "b", scenes)
    same = [x == y for x, y in zip(a, b)]
    # format round trips
    rng = np.random.default_rng(9)
    grid = rng.random((7, 5)).astype(np.float32)
    grids_ok = all(decode_grid(encode_grid(grid, m), m).tobytes() == grid.tobytes() for m in (DEPTH_MAGIC, HEATMAP_MAGIC))
    save_dataset(scenes, tmp_path / "data")
    loaded, rejects = load_dataset(tmp_path / "data")
    data_ok = not rejects and all(
        x == y and x.pixels.tobytes() == y.pixels.tobytes() and x.depth.tobytes() == y.depth.tobytes()
        for x, y in zip(scenes, loaded)
    )
    model, _ = load_checkpoint(tmp_path / "a" / "run" / "last.ckpt")
    save_checkpoint(model, tmp_path / "again.ckpt", json.loads(zipfile.ZipFile(tmp_path / "a" / "run" / "last.ckpt").read("config.json")))
    ckpt_ok = (tmp_path / "again.ckpt").read_bytes() == a[0]
    preds = read_predictions(scenes, tmp_path / "a" / "pred")
    write_predictions(scenes, preds, tmp_path / "pred2")
    pred_ok = all(
        (tmp_path / "a" / "pred" / p.relative_to(tmp_path / "pred2")).read_bytes() == p.read_bytes()
        for p in (tmp_path / "pred2").rglob("*") if p.is_file()
    )
    record_property(
        "detail",
        f"identical checkpoint/report/overlay {same}; round trips grid {grids_ok} dataset {data_ok} "
        f"checkpoint {ckpt_ok} predictions {pred_ok}",
    )
    assert all(same)
    assert grids_ok and data_ok and ckpt_ok and pred_ok
