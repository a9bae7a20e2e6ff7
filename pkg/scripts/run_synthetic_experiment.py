"""Phantom experiment: train all three phases, then score every map mode on the test split.

    python scripts/run_synthetic_experiment.py --out runs/phantom
    python scripts/run_synthetic_experiment.py --out runs/quick --config configs/tiny.yaml --cases 12 --dims 8,32,32

Writes checkpoints, a per-mode Dice/IoU/HD95 table (``results.json``) and a
few overlay panels under ``--out``.
"""

import argparse
import json
import logging
import time
from pathlib import Path

from amecam.data import build_manifest, generate_synthetic, save_volume
from amecam.inference import MODES, ground_truth, predict_maps
from amecam.metrics import evaluate_dataset, render_overlay, threshold_map
from amecam.training import (
    RunConfig,
    exit_accuracy,
    init_checkpoint,
    load_split,
    run_aggregation_phase,
    run_multi_exit_phase,
    run_pretrain_phase,
)

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--config", type=Path, default=ROOT / "configs" / "synthetic.yaml")
    ap.add_argument("--cases", type=int, default=40)
    ap.add_argument("--dims", default="16,128,128")
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--thresholds", default="0.3,0.5,0.7")
    ap.add_argument("--panels", type=int, default=6, help="overlay panels per mode")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    t0 = time.perf_counter()

    d, h, w = (int(v) for v in args.dims.split(","))
    data_dir = args.out / "data"
    vols = generate_synthetic(args.cases, d, h, w, 0.7, seed=args.seed)
    for v in vols:
        save_volume(v, data_dir)
    man = build_manifest(vols, (0.8, 0.1, 0.1), seed=args.seed)
    man.data_dir = "data"
    man.save(args.out / "manifest.json")
    man.data_dir = str(data_dir)

    cfg = RunConfig.load(args.config)
    S = cfg.backbone.input_size
    train, val, test = (load_split(man, s, S) for s in ("train", "val", "test"))
    logging.info("slices: train %d, val %d, test %d", len(train), len(val), len(test))

    ckpt = run_pretrain_phase(cfg.pretrain, train, init_checkpoint(cfg, cfg.pretrain.seed))
    ckpt = run_multi_exit_phase(cfg.multi_exit, train, ckpt, val)
    ckpt.save(args.out / "classifier.pt")
    acc = exit_accuracy(ckpt.build_model(), val)
    classifier_epochs = ckpt.epoch
    ckpt = run_aggregation_phase(cfg.aggregation, train, ckpt, cfg.attention)
    ckpt.save(args.out / "aggregator.pt")

    thresholds = [float(t) for t in args.thresholds.split(",")]
    gt = ground_truth(test)
    table = {}
    for mode in MODES:
        maps = predict_maps(ckpt, test, mode)
        table[mode] = {}
        for t in thresholds:
            s = evaluate_dataset(maps, gt, t).summary
            table[mode][str(t)] = {k: s[k]["mean"] for k in ("dice", "iou", "hd95")}
        keys = [k for k in sorted(maps) if gt[k].any()][: args.panels]
        for cid, z in keys:
            i = next(j for j, key in enumerate(zip(test.case_ids, test.z_index)) if key == (cid, z))
            image = test.images[i, 0].numpy()
            render_overlay(image, maps[(cid, z)], args.out / "panels" / mode / f"{cid}_z{z:04d}_map.png")
            render_overlay(image, threshold_map(maps[(cid, z)], 0.5), args.out / "panels" / mode / f"{cid}_z{z:04d}_mask.png")

    results = {"val_exit_accuracy": acc, "classifier_epochs": classifier_epochs, "dice_table": table}
    results["minutes"] = (time.perf_counter() - t0) / 60
    (args.out / "results.json").write_text(json.dumps(results, indent=1, sort_keys=True))

    print(f"val accuracy per exit: {[round(a, 3) for a in acc]}")
    print("mode        " + "".join(f"Dice@{t:<7}" for t in thresholds))
    for mode, row in table.items():
        print(f"{mode:<12}" + "".join(f"{row[str(t)]['dice']:<12.3f}" for t in thresholds))
    print(f"{results['minutes']:.1f} min")


if __name__ == "__main__":
    main()
