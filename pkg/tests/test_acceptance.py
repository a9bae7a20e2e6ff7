"""The twelve acceptance criteria, one test each, each logging a PASS/FAIL line."""

import itertools
import json
import math
import time

import numpy as np
import pytest
import torch

from amecam.aggregation import AttentionField, AttentionNet, FgBgEmbedding, attentive_aggregate, c2am_loss
from amecam.cam import (
    ActivationMap,
    average_aggregate,
    compute_exit_cam,
    exit_cams,
    grad_cam_reference,
    load_cam_dir,
    minmax_normalize,
    save_cam,
    upsample_map,
)
from amecam.data import DatasetManifest, build_manifest, generate_synthetic, save_volume
from amecam.metrics import dice, hd95, iou
from amecam.model import BackboneConfig, MultiExitNet, forward_multi_exit, multi_exit_ce_loss, supcon_loss
from amecam.training import (
    Checkpoint,
    PhaseConfig,
    RunConfig,
    cosine_lr,
    exit_accuracy,
    init_checkpoint,
    load_split,
    params_hash,
    run_aggregation_phase,
    run_multi_exit_phase,
)
from pipeline import CONFIGS, invoke, run_pipeline

EPS = 1e-6


def _mask_corpus(n=200, size=32, seed=0):
    """Random blob-ish mask pairs: thresholded smooth noise, never empty."""
    r = np.random.default_rng(seed)
    pairs = []
    while len(pairs) < n:
        a, b = (upsample_map(r.random((5, 5)), (size, size)) > r.uniform(0.4, 0.8) for _ in range(2))
        if a.any() and b.any():
            pairs.append((a, b))
    return pairs


def _boundary_pts(m):
    H, W = m.shape
    pts = []
    for y, x in itertools.product(range(H), range(W)):
        if m[y, x] and any(
            not (0 <= a < H and 0 <= c < W) or not m[a, c] for a, c in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1))
        ):
            pts.append((y, x))
    return np.array(pts, np.float64)


def _hd95_exhaustive(p, g):
    bp, bg = _boundary_pts(p), _boundary_pts(g)
    d = np.sqrt(((bp[:, None, :] - bg[None, :, :]) ** 2).sum(-1))
    return float(np.percentile(np.concatenate([d.min(axis=1), d.min(axis=0)]), 95))


def _fd_check(fn, tensors, h=1e-4):
    """Central differences on every entry of ``tensors`` against autograd; returns worst relative error."""
    for t in tensors:
        t.grad = None
    fn(*tensors).backward()
    worst = 0.0
    for t in tensors:
        num = torch.zeros_like(t)
        with torch.no_grad():
            for idx in itertools.product(*map(range, t.shape)):
                orig = t[idx].item()
                t[idx] = orig + h
                up = fn(*tensors).item()
                t[idx] = orig - h
                down = fn(*tensors).item()
                t[idx] = orig
                num[idx] = (up - down) / (2 * h)
        err = (t.grad - num).abs() / num.abs().clamp_min(1e-6)
        # entries whose true gradient is ~0 are judged on absolute error
        err = torch.where(num.abs() < 1e-6, (t.grad - num).abs(), err)
        worst = max(worst, err.max().item())
    return worst


def test_01_metric_oracles(acceptance_log):
    pairs = _mask_corpus()
    t0 = time.perf_counter()
    worst_overlap, hd_mismatch = 0.0, 0
    for p, g in pairs:
        inter = int(np.logical_and(p, g).sum())
        union = int(np.logical_or(p, g).sum())
        worst_overlap = max(
            worst_overlap,
            abs(dice(p, g) - 2 * inter / (p.sum() + g.sum())),
            abs(iou(p, g) - inter / union),
        )
        hd_mismatch += hd95(p, g) != _hd95_exhaustive(p, g)
    elapsed = time.perf_counter() - t0
    ok = worst_overlap <= 1e-12 and hd_mismatch == 0 and elapsed < 10
    acceptance_log("1 metric oracle equivalence", ok, f"max |d| {worst_overlap:.1e}, hd95 mismatches {hd_mismatch}, {elapsed:.2f}s")
    assert ok


def test_02_dice_iou_identity(acceptance_log):
    worst = max(abs(dice(p, g) - 2 * iou(p, g) / (1 + iou(p, g))) for p, g in _mask_corpus())
    ok = worst <= 1e-12
    acceptance_log("2 Dice-IoU identity", ok, f"max deviation {worst:.1e}")
    assert ok


def test_03_hd95_anchors(acceptance_log):
    m = np.zeros((8, 8), np.uint8)
    m[2:5, 3:6] = 1
    a = np.zeros((5, 5), np.uint8)
    b = np.zeros((5, 5), np.uint8)
    a[0, 0] = 1
    b[3, 4] = 1
    same, single = hd95(m, m), hd95(a, b)
    ok = same == 0.0 and single == 5.0
    acceptance_log("3 HD95 anchors", ok, f"identical {same}, (0,0)/(3,4) {single}")
    assert ok


def test_04_attention_convexity(acceptance_log):
    r = np.random.default_rng(0)
    draws, worst_sum, min_w = 0, 0.0, 1.0
    g = torch.Generator().manual_seed(0)
    # 100 random parameter draws x 100 pixels = 10^4 (params, input) draws
    for _ in range(100):
        net = AttentionNet(4, 8)
        with torch.no_grad():
            for p in net.parameters():
                p.copy_(torch.randn(p.shape, generator=g) * 2)
            img = torch.tensor(r.random((1, 1, 10, 10)), dtype=torch.float32)
            cams = torch.tensor(r.random((1, 4, 10, 10)), dtype=torch.float32)
            w = net(img, cams)[0].double()
        worst_sum = max(worst_sum, (w.sum(0) - 1).abs().max().item())
        min_w = min(min_w, w.min().item())
        draws += w.shape[1] * w.shape[2]

    cams = [minmax_normalize(c) for c in r.random((4, 16, 16))]
    one_hot_ok = True
    for k in range(4):
        w = np.zeros((4, 16, 16))
        w[k] = 1
        one_hot_ok &= np.array_equal(attentive_aggregate(cams, AttentionField(w)).values, cams[k])
    uniform = attentive_aggregate(cams, AttentionField(np.full((4, 16, 16), 0.25))).values
    uniform_ok = uniform.tobytes() == average_aggregate(cams).values.tobytes()

    ok = draws >= 10_000 and worst_sum <= 1e-6 and min_w >= 0 and one_hot_ok and uniform_ok
    acceptance_log(
        "4 attention convexity",
        ok,
        f"{draws} draws, max |sum-1| {worst_sum:.1e}, min w {min_w:.1e}, one-hot {one_hot_ok}, uniform==avg {uniform_ok}",
    )
    assert ok


def test_05_gradient_checks(acceptance_log):
    r = np.random.default_rng(7)
    worst = {"c2am": 0.0, "supcon": 0.0, "ce": 0.0}
    for _ in range(20):
        fg = torch.tensor(r.normal(size=(3, 4)), requires_grad=True)
        bg = torch.tensor(r.normal(size=(3, 4)), requires_grad=True)
        worst["c2am"] = max(
            worst["c2am"], _fd_check(lambda f, b: c2am_loss(FgBgEmbedding(f, b, torch.ones(3), torch.ones(3)), EPS), [fg, bg])
        )

        raw = torch.tensor(r.normal(size=(6, 5)), requires_grad=True)
        labels = torch.tensor([0, 0, 1, 1, 2, 2])
        worst["supcon"] = max(
            worst["supcon"], _fd_check(lambda z: supcon_loss(torch.nn.functional.normalize(z, dim=1), labels, 0.5), [raw])
        )

        logits = [torch.tensor(r.normal(size=(3, 2)), requires_grad=True) for _ in range(4)]
        y = torch.tensor(r.integers(0, 2, 3))
        worst["ce"] = max(worst["ce"], _fd_check(lambda *z: multi_exit_ce_loss(list(z), y), logits))
    ok = all(v < 1e-4 for v in worst.values())
    acceptance_log("5 loss gradient checks", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert ok


def test_06_loss_anchors(acceptance_log):
    ce = multi_exit_ce_loss([torch.zeros(1, 2, dtype=torch.float64) for _ in range(4)], 1).item()
    sc = supcon_loss(torch.tensor([[0.0, 1.0]] * 3, dtype=torch.float64), [1, 1, 1], 0.07).item()
    fg = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
    bg = torch.tensor([[0.0, 1.0], [0.0, 1.0]], dtype=torch.float64)
    c2 = c2am_loss(FgBgEmbedding(fg, bg, torch.ones(2), torch.ones(2)), EPS).item()
    errs = (abs(ce - 4 * math.log(2)), abs(sc - 3 * math.log(2)), abs(c2 + math.log(0.5 + EPS)))
    ok = errs[0] <= 1e-9 and errs[1] <= 1e-6 and errs[2] <= 1e-6
    acceptance_log("6 analytic loss anchors", ok, f"CE {ce:.10f}, SupCon {sc:.7f}, C2AM {c2:.7f}")
    assert ok


def test_07_gradcam_cam_identity(acceptance_log):
    worst = 0.0
    cfg = BackboneConfig(stage_channels=[8, 16, 32, 64], input_size=64)
    for seed in range(10):
        torch.manual_seed(seed)
        model = MultiExitNet(cfg).double().eval()
        img = np.random.default_rng(seed).random((64, 64))
        with torch.no_grad():
            feats = forward_multi_exit(torch.tensor(img), model).features[3]
        ref = compute_exit_cam(feats, model.exit_head(4)).values
        worst = max(worst, np.abs(grad_cam_reference(img, model).values - ref).max())
    ok = worst <= 1e-5
    acceptance_log("7 Grad-CAM / CAM identity", ok, f"max |diff| {worst:.1e} over 10 models")
    assert ok


def test_08_resolution_ladder(acceptance_log, tmp_path):
    cfg = BackboneConfig(stage_channels=[8, 16, 32, 64], input_size=128)
    torch.manual_seed(0)
    model = MultiExitNet(cfg).eval()
    x = torch.rand(2, 1, 128, 128)
    with torch.no_grad():
        sides = [f.shape[-1] for f in model(x).features]
        feats = model(x).features
    cams = exit_cams(model, x)
    shapes_ok = tuple(cams.shape[-2:]) == (128, 128)
    corner_ok = True
    for k in range(4):
        native = compute_exit_cam(feats[k][0], model.exit_head(k + 1)).values
        up = upsample_map(native, (128, 128))
        corner_ok &= all(up[i, j] == native[i, j] for i, j in ((0, 0), (0, -1), (-1, 0), (-1, -1)))
    # round-trip through the export format keeps input resolution
    for k in range(4):
        save_cam(ActivationMap(cams[0, k].numpy(), f"exit{k + 1}", (sides[k], sides[k])), tmp_path, "c", k)
    export_ok = all(c.shape == (128, 128) for c, _ in load_cam_dir(tmp_path).values())
    ok = sides == [32, 16, 8, 4] and shapes_ok and corner_ok and export_ok
    acceptance_log("8 resolution ladder", ok, f"exit sizes {sides}, exports 128x128 {export_ok}, corners exact {corner_ok}")
    assert ok


def test_09_pipeline_determinism(acceptance_log, tmp_path):
    a = run_pipeline(tmp_path / "run_a")["attentive"].read_bytes()
    b = run_pipeline(tmp_path / "run_b")["attentive"].read_bytes()
    ok = a == b
    acceptance_log("9 full-pipeline determinism", ok, f"report bytes {'identical' if ok else 'differ'} ({len(a)} bytes)")
    assert ok


@pytest.mark.slow
def test_10_synthetic_end_to_end(acceptance_log, tmp_path):
    """Phantom run at 128 px: classifier accuracy, then attentive vs averaged Dice on held-out slices."""
    t0 = time.perf_counter()
    config = CONFIGS / "synthetic.yaml"
    cfg = RunConfig.load(config)
    work = tmp_path
    data, man_path = work / "data", work / "manifest.json"
    invoke("synth", "--cases", 40, "--dims", "16,128,128", "--tumor-frac", 0.7, "--seed", 1, "--out", data)
    invoke("manifest", "--data", data, "--ratios", "0.8,0.1,0.1", "--seed", 1, "--out", man_path)
    man = DatasetManifest.load(man_path)
    n_slices = sum(man.counts.values())
    invoke("pretrain", "--config", config, "--manifest", man_path, "--ckpt-out", work / "pre.pt")
    invoke("train-classifier", "--config", config, "--manifest", man_path, "--resume", work / "pre.pt", "--ckpt-out", work / "cls.pt")
    invoke("train-aggregator", "--config", config, "--manifest", man_path, "--resume", work / "cls.pt", "--ckpt-out", work / "agg.pt")

    cls = Checkpoint.load(work / "cls.pt")
    val = load_split(man, "val", cfg.backbone.input_size)
    acc = exit_accuracy(cls.build_model(), val)
    epochs = cls.epoch

    dices = {}
    for mode in ("avg", "attentive"):
        invoke("cam", "--ckpt", work / "agg.pt", "--split", "test", "--mode", mode, "--out", work / mode, "--manifest", man_path)
        invoke("eval", "--cams", work / mode, "--manifest", man_path, "--threshold", 0.5, "--report", work / f"{mode}.json")
        dices[mode] = json.loads((work / f"{mode}.json").read_text())["summary"]["dice"]["mean"]
    elapsed = time.perf_counter() - t0

    ok = (
        n_slices >= 500
        and epochs <= 20
        and min(acc) >= 0.9
        and dices["attentive"] >= 0.5
        and dices["attentive"] >= dices["avg"]
        and elapsed < 30 * 60
    )
    acceptance_log(
        "10 synthetic end-to-end",
        ok,
        f"{n_slices} slices, {epochs} classifier epochs, val acc {[round(a, 3) for a in acc]}, "
        f"Dice@0.5 attentive {dices['attentive']:.3f} vs avg {dices['avg']:.3f}, {elapsed / 60:.1f} min",
    )
    assert ok


def test_11_freeze_contract(acceptance_log, tmp_path):
    vols = generate_synthetic(8, 8, 32, 32, 0.7, seed=3)
    for v in vols:
        save_volume(v, tmp_path)
    man = build_manifest(vols, (0.6, 0.2, 0.2), seed=0)
    man.data_dir = str(tmp_path)
    train = load_split(man, "train", 32)
    run = RunConfig.load(CONFIGS / "tiny.yaml")
    cls = run_multi_exit_phase(PhaseConfig("multi_exit", epochs=1, batch_size=8), train, init_checkpoint(run, 0))
    before = params_hash(cls.params)
    agg = run_aggregation_phase(PhaseConfig("aggregation", lr_init=1e-2, epochs=2, batch_size=4), train, cls, run.attention)
    after = params_hash(agg.params)
    moved = any(not torch.equal(v, torch.zeros_like(v)) for k, v in agg.params.items() if k.startswith("attention.out"))
    ok = before == after and moved
    acceptance_log("11 freeze contract", ok, f"backbone sha256 {before[:12]} -> {after[:12]}, attention trained {moved}")
    assert ok


def test_12_cosine_anchors(acceptance_log):
    T = 100
    lrs = [cosine_lr(t, T) for t in range(T + 1)]
    anchors = (lrs[0], lrs[T], lrs[T // 2])
    monotone = all(a >= b for a, b in zip(lrs, lrs[1:]))
    ok = (
        math.isclose(anchors[0], 1e-4, rel_tol=0, abs_tol=1e-15)
        and math.isclose(anchors[1], 5e-6, rel_tol=0, abs_tol=1e-15)
        and math.isclose(anchors[2], 5.25e-5, rel_tol=0, abs_tol=1e-15)
        and monotone
    )
    acceptance_log("12 cosine schedule anchors", ok, f"eta(0)={anchors[0]:.3g}, eta(T)={anchors[1]:.3g}, eta(T/2)={anchors[2]:.4g}, monotone {monotone}")
    assert ok
