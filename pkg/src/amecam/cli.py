"""``amecam`` command-line entry point."""

from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Optional

import click
import numpy as np

from .cam import load_cam_dir, save_cam
from .data import DatasetManifest, build_manifest, generate_synthetic, load_directory, load_volume, save_volume, slice_volume
from .inference import MODES, predict_maps
from .metrics import evaluate_dataset, parse_sweep, render_overlay, threshold_map
from .metrics import threshold_sweep as sweep_thresholds
from .training import (
    Checkpoint,
    RunConfig,
    init_checkpoint,
    load_split,
    run_aggregation_phase,
    run_multi_exit_phase,
    run_pretrain_phase,
    write_metrics_csv,
)

log = logging.getLogger("amecam")


def _floats(text: str, n: Optional[int] = None) -> list[float]:
    vals = [float(v) for v in text.split(",")]
    if n is not None and len(vals) != n:
        raise click.BadParameter(f"expected {n} comma-separated values, got {text!r}")
    return vals


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log per-epoch progress.")
def main(verbose: bool):
    """Attentive multiple-exit CAM pipeline."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--cases", type=int, required=True)
@click.option("--dims", required=True, help="D,H,W")
@click.option("--tumor-frac", type=float, default=0.7, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
def synth(cases, dims, tumor_frac, seed, out):
    """Write a synthetic phantom dataset."""
    d, h, w = (int(v) for v in _floats(dims, 3))
    for vol in generate_synthetic(cases, d, h, w, tumor_frac, seed):
        save_volume(vol, out)
    click.echo(f"wrote {cases} volumes to {out}")


@main.command()
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--ratios", default="0.8,0.1,0.1", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def manifest(data_dir, ratios, seed, out):
    """Split cases into train/val/test and write the manifest JSON."""
    vols = load_directory(data_dir)
    man = build_manifest(vols, _floats(ratios, 3), seed)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    man.data_dir = os.path.relpath(Path(data_dir).resolve(), out.parent.resolve())
    man.save(out)
    click.echo(f"{len(vols)} cases -> {man.counts}")


def _training_inputs(config_path: str, manifest_path: Optional[str]):
    cfg = RunConfig.load(config_path)
    path = manifest_path or cfg.manifest
    if path is None:
        raise click.UsageError("no manifest given (config data.manifest or --manifest)")
    man = DatasetManifest.load(path)
    cfg.manifest = str(Path(path).resolve())
    return cfg, man


def _finish(ckpt: Checkpoint, ckpt_out: str, log_csv: Optional[str]):
    ckpt.save(ckpt_out)
    write_metrics_csv(ckpt, log_csv or Path(ckpt_out).with_suffix(".metrics.csv"))
    click.echo(f"saved {ckpt.phase} checkpoint ({ckpt.epoch} epochs) to {ckpt_out}")


_train_options = [
    click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), required=True),
    click.option("--ckpt-out", type=click.Path(dir_okay=False), required=True),
    click.option("--resume", type=click.Path(exists=True, dir_okay=False), default=None),
    click.option("--manifest", "manifest_path", type=click.Path(exists=True, dir_okay=False), default=None),
    click.option("--log-csv", type=click.Path(dir_okay=False), default=None, help="Per-epoch CSV log (appended)."),
]


def train_options(fn):
    for opt in reversed(_train_options):
        fn = opt(fn)
    return fn


@main.command()
@train_options
def pretrain(config_path, ckpt_out, resume, manifest_path, log_csv):
    """SupCon pretraining of the backbone."""
    cfg, man = _training_inputs(config_path, manifest_path)
    init = Checkpoint.load(resume) if resume else init_checkpoint(cfg, cfg.pretrain.seed)
    train = load_split(man, "train", cfg.backbone.input_size)
    _finish(run_pretrain_phase(cfg.pretrain, train, init), ckpt_out, log_csv)


@main.command("train-classifier")
@train_options
def train_classifier(config_path, ckpt_out, resume, manifest_path, log_csv):
    """Multi-exit classifier fine-tuning (Adam)."""
    cfg, man = _training_inputs(config_path, manifest_path)
    init = Checkpoint.load(resume) if resume else init_checkpoint(cfg, cfg.multi_exit.seed)
    train = load_split(man, "train", cfg.backbone.input_size)
    val = load_split(man, "val", cfg.backbone.input_size)
    _finish(run_multi_exit_phase(cfg.multi_exit, train, init, val), ckpt_out, log_csv)


@main.command("train-aggregator")
@train_options
def train_aggregator(config_path, ckpt_out, resume, manifest_path, log_csv):
    """Attention aggregation training (SGD) on a trained classifier."""
    if resume is None:
        raise click.UsageError("train-aggregator needs --resume <classifier checkpoint>")
    cfg, man = _training_inputs(config_path, manifest_path)
    ckpt = Checkpoint.load(resume)
    train = load_split(man, "train", ckpt.backbone_config.input_size)
    _finish(run_aggregation_phase(cfg.aggregation, train, ckpt, cfg.attention), ckpt_out, log_csv)


@main.command()
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--split", type=click.Choice(["train", "val", "test"]), default="test", show_default=True)
@click.option("--mode", type=click.Choice(MODES), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--manifest", "manifest_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--png", is_flag=True, help="Also write 8-bit grayscale previews.")
def cam(ckpt, split, mode, out, manifest_path, png):
    """Export activation maps for one split."""
    ck = Checkpoint.load(ckpt)
    path = manifest_path or ck.config.get("data", {}).get("manifest")
    if path is None:
        raise click.UsageError("checkpoint records no manifest; pass --manifest")
    man = DatasetManifest.load(path)
    data = load_split(man, split, ck.backbone_config.input_size)
    maps = predict_maps(ck, data, mode)
    for (case_id, z), m in maps.items():
        save_cam(m, out, case_id, z, png=png)
    click.echo(f"wrote {len(maps)} {mode} maps to {out}")


def _ground_truth(man: DatasetManifest, keys, shape, data_dir=None):
    data_dir = Path(data_dir or man.data_dir or ".")
    by_case: dict[str, list[int]] = {}
    for cid, z in keys:
        by_case.setdefault(cid, []).append(z)
    gt = {}
    for cid, zs in by_case.items():
        path = data_dir / f"{cid}.json"
        if not path.exists():
            path = next((p for p in (data_dir / f"{cid}.nii.gz", data_dir / f"{cid}.nii") if p.exists()), path)
        vol = load_volume(path)
        if vol.mask is None:
            raise click.UsageError(f"{cid} has no ground-truth mask")
        for z in zs:
            plane = vol.mask[z]
            if plane.shape != tuple(shape):
                # nearest-neighbour resample to the map grid
                ri = np.minimum((np.arange(shape[0]) * plane.shape[0]) // shape[0], plane.shape[0] - 1)
                ci = np.minimum((np.arange(shape[1]) * plane.shape[1]) // shape[1], plane.shape[1] - 1)
                plane = plane[np.ix_(ri, ci)]
            gt[(cid, z)] = plane
    return gt


@main.command("eval")
@click.option("--cams", "cam_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--manifest", "manifest_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--threshold", type=float, default=0.5, show_default=True)
@click.option("--threshold-sweep", default=None, help="A:B:STEP, e.g. 0.1:0.9:0.1")
@click.option("--report", type=click.Path(dir_okay=False), required=True)
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), default=None)
@click.option("--split", type=click.Choice(["train", "val", "test"]), default=None, help="Restrict to one split.")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), default=None)
def eval_cmd(cam_dir, manifest_path, threshold, threshold_sweep, report, csv_path, split, data_dir):
    """Score exported maps against ground-truth masks."""
    man = DatasetManifest.load(manifest_path)
    loaded = load_cam_dir(cam_dir)
    if not loaded:
        raise click.UsageError(f"no maps found in {cam_dir}")
    allowed = {(e.case_id, e.z_index) for e in (man.select(split) if split else man.entries)}
    keys = sorted(k for k in loaded if k in allowed)
    preds = {k: loaded[k][0] for k in keys}
    shape = next(iter(preds.values())).shape if preds else (0, 0)
    gt = _ground_truth(man, keys, shape, data_dir)
    sources = sorted({m.source for m in preds.values()})
    config = {"threshold": threshold, "split": split, "sources": sources}
    rep = evaluate_dataset(preds, gt, threshold, keys, config=config)
    if threshold_sweep:
        config["threshold_sweep"] = threshold_sweep
        rep.extra["threshold_sweep"] = sweep_thresholds(preds, gt, parse_sweep(threshold_sweep), keys)
    rep.write_json(report)
    if csv_path:
        rep.write_csv(csv_path)
    s = rep.summary
    click.echo(
        f"n={rep.n_evaluated} (skipped {rep.n_skipped})  "
        f"dice {s['dice']['mean']:.4f}±{s['dice']['std']:.4f}  "
        f"iou {s['iou']['mean']:.4f}±{s['iou']['std']:.4f}  "
        f"hd95 {_fmt(s['hd95']['mean'])}±{_fmt(s['hd95']['std'])}"
    )


def _fmt(v):
    return "nan" if v is None else f"{v:.3f}"


@main.command()
@click.option("--cams", "cam_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--images", "image_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--threshold", type=float, default=None, help="Overlay the thresholded mask instead of the raw map.")
def overlay(cam_dir, image_dir, out, threshold):
    """Render map (or mask) overlays on the source slices as PNG panels."""
    loaded = load_cam_dir(cam_dir)
    volumes = {}
    n = 0
    for (cid, z), (m, _) in sorted(loaded.items()):
        if cid not in volumes:
            volumes[cid] = {s.z_index: s for s in slice_volume(load_volume(Path(image_dir) / f"{cid}.json"))}
        image = volumes[cid][z].image
        if image.shape != m.shape:
            from .training import _resize

            image = _resize(image, m.shape[0], "bilinear")
        ov = threshold_map(m, threshold) if threshold is not None else m
        render_overlay(image, ov, Path(out) / f"{cid}_z{z:04d}.png")
        n += 1
    click.echo(f"wrote {n} overlays to {out}")


if __name__ == "__main__":
    main()
