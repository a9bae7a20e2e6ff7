"""Aggregation ablation on a trained classifier: loss (c2am vs cross_entropy) x pixel feature source.

    python scripts/ablate_aggregation.py --run runs/phantom

Reuses ``classifier.pt`` and ``manifest.json`` from a finished
``run_synthetic_experiment.py`` run and retrains only the attention net for
each variant; prints test Dice at threshold 0.5 and the mean attention weight
per exit on tumor slices.
"""

import argparse
import json
import logging
from dataclasses import replace
from pathlib import Path

import torch

from amecam.cam import exit_cams
from amecam.data import DatasetManifest
from amecam.inference import ground_truth, predict_maps
from amecam.metrics import evaluate_dataset
from amecam.training import Checkpoint, RunConfig, load_split, run_aggregation_phase

VARIANTS = [
    ("c2am", "exit4", True),
    ("c2am", "all_exits", True),
    ("c2am", "all_exits", False),
    ("c2am", "hypercolumn", True),
    ("cross_entropy", "exit4", True),
]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--run", required=True, help="output directory of run_synthetic_experiment.py")
    ap.add_argument("--config", default=None, help="defaults to configs/synthetic.yaml")
    ap.add_argument("--threshold", type=float, default=0.5)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    run = Path(args.run)
    config = Path(args.config) if args.config else Path(__file__).resolve().parents[1] / "configs" / "synthetic.yaml"
    cfg = RunConfig.load(config)
    cls = Checkpoint.load(run / "classifier.pt")
    man = DatasetManifest.load(run / "manifest.json")
    S = cls.backbone_config.input_size
    train, test = load_split(man, "train", S), load_split(man, "test", S)
    gt = ground_truth(test)
    tumor = test.subset((test.labels == 1).nonzero().flatten())

    base = evaluate_dataset(predict_maps(cls, test, "avg"), gt, args.threshold).summary["dice"]["mean"]
    rows = [{"variant": "avg (no attention)", "dice": base}]
    for loss, source, train_proj in VARIANTS:
        acfg = replace(cfg.attention, loss=loss, feature_source=source, train_projector=train_proj)
        agg = run_aggregation_phase(cfg.aggregation, train, cls, acfg)
        dice = evaluate_dataset(predict_maps(agg, test, "attentive"), gt, args.threshold).summary["dice"]["mean"]
        att, _ = agg.build_attention()
        with torch.no_grad():
            x = tumor.images
            w = att(x, exit_cams(agg.build_model(), x).float()).mean(dim=(0, 2, 3))
        rows.append({"variant": f"{loss}/{source}/proj={'train' if train_proj else 'frozen'}", "dice": dice, "exit_weights": w.tolist()})

    (run / "ablation.json").write_text(json.dumps(rows, indent=1))
    for r in rows:
        weights = " ".join(f"{v:.2f}" for v in r.get("exit_weights", []))
        print(f"{r['variant']:<36} Dice@{args.threshold} {r['dice']:.3f}   {weights}")


if __name__ == "__main__":
    main()
