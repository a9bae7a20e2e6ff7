"""Thresholding, Dice / IoU / HD95, dataset reports and overlay rendering."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np
from scipy.spatial import cKDTree

from .cam import ActivationMap
from .errors import (
    BadThreshold,
    EmptyGroundTruth,
    EmptyMask,
    NoEvaluableSamples,
    ShapeMismatch,
    UnwritablePath,
)


@dataclass
class SegmentationMask:
    values: np.ndarray
    threshold_used: float


def _values(m) -> np.ndarray:
    if isinstance(m, (ActivationMap, SegmentationMask)):
        return m.values
    return np.asarray(m)


def threshold_map(m, threshold: float = 0.5) -> SegmentationMask:
    if not 0.0 < threshold < 1.0:
        raise BadThreshold(f"threshold must lie in (0, 1), got {threshold}")
    return SegmentationMask((_values(m) > threshold).astype(np.uint8), float(threshold))


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = _values(pred).astype(bool)
    g = _values(gt).astype(bool)
    if p.shape != g.shape:
        raise ShapeMismatch(f"pred {p.shape} vs gt {g.shape}")
    if not g.any():
        raise EmptyGroundTruth("ground-truth mask is empty")
    return p, g


def dice(pred, gt) -> float:
    p, g = _pair(pred, gt)
    inter = np.count_nonzero(p & g)
    return 2.0 * inter / (np.count_nonzero(p) + np.count_nonzero(g))


def iou(pred, gt) -> float:
    p, g = _pair(pred, gt)
    return np.count_nonzero(p & g) / np.count_nonzero(p | g)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Set pixels with at least one unset (or out-of-bounds) 4-neighbour."""
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return m & ~interior


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    d, _ = cKDTree(dst).query(src, k=1)
    return np.asarray(d, dtype=np.float64)


def surface_distances(pred, gt) -> np.ndarray:
    """Concatenated nearest boundary distances pred->gt and gt->pred."""
    p = _values(pred).astype(bool)
    g = _values(gt).astype(bool)
    if p.shape != g.shape:
        raise ShapeMismatch(f"pred {p.shape} vs gt {g.shape}")
    if not p.any() or not g.any():
        raise EmptyMask("HD95 needs two non-empty masks")
    bp = np.argwhere(boundary(p)).astype(np.float64)
    bg = np.argwhere(boundary(g)).astype(np.float64)
    return np.concatenate([_directed(bp, bg), _directed(bg, bp)])


def hd95(pred, gt) -> float:
    return float(np.percentile(surface_distances(pred, gt), 95))


def hausdorff(pred, gt) -> float:
    return float(surface_distances(pred, gt).max())


# ---------------------------------------------------------------------------
# reports


@dataclass
class SampleMetrics:
    case_id: str
    z_index: int
    dice: float
    iou: float
    hd95: Optional[float]


def _mean_std(xs: list[float]) -> dict:
    if not xs:
        return {"mean": None, "std": None}
    a = np.asarray(xs, dtype=np.float64)
    return {"mean": float(a.mean()), "std": float(a.std())}


@dataclass
class MetricsReport:
    per_sample: list[SampleMetrics]
    n_evaluated: int
    n_skipped: int
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def summary(self) -> dict:
        rows = sorted(self.per_sample, key=lambda r: (r.case_id, r.z_index))
        return {
            "dice": _mean_std([r.dice for r in rows]),
            "iou": _mean_std([r.iou for r in rows]),
            "hd95": _mean_std([r.hd95 for r in rows if r.hd95 is not None]),
        }

    def to_dict(self) -> dict:
        return {
            "per_sample": [
                {"case_id": r.case_id, "z_index": r.z_index, "dice": r.dice, "iou": r.iou, "hd95": r.hd95}
                for r in self.per_sample
            ],
            "summary": self.summary,
            "n_evaluated": self.n_evaluated,
            "n_skipped": self.n_skipped,
            "config": self.config,
            **self.extra,
        }

    def write_json(self, path) -> None:
        _writable(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    def write_csv(self, path) -> None:
        with _writable(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["case_id", "z_index", "dice", "iou", "hd95"])
            for r in self.per_sample:
                w.writerow([r.case_id, r.z_index, repr(r.dice), repr(r.iou), "" if r.hd95 is None else repr(r.hd95)])


def _writable(path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UnwritablePath(str(path)) from exc
    return path


def evaluate_dataset(
    predictions: Mapping[tuple[str, int], object],
    ground_truth: Mapping[tuple[str, int], np.ndarray],
    threshold: float = 0.5,
    keys: Optional[Iterable[tuple[str, int]]] = None,
    config: Optional[dict] = None,
) -> MetricsReport:
    """Score maps (thresholded) or ready-made masks against ground truth.

    ``keys`` restricts evaluation to e.g. one manifest split; slices whose
    ground truth is empty are skipped and counted.
    """
    keys = sorted(keys if keys is not None else predictions)
    rows, skipped = [], 0
    for key in keys:
        gt = np.asarray(ground_truth[key])
        if not gt.any():
            skipped += 1
            continue
        pred = predictions[key]
        mask = pred if isinstance(pred, SegmentationMask) else threshold_map(pred, threshold)
        d = dice(mask, gt)
        j = iou(mask, gt)
        h = hd95(mask, gt) if mask.values.any() else None
        rows.append(SampleMetrics(key[0], int(key[1]), float(d), float(j), h))
    if not rows:
        raise NoEvaluableSamples("no slice with a non-empty ground-truth mask")
    return MetricsReport(rows, len(rows), skipped, config=dict(config or {}))


def threshold_sweep(predictions, ground_truth, thresholds: Iterable[float], keys=None) -> dict:
    """Mean Dice per threshold plus the best one."""
    rows = []
    for t in thresholds:
        rep = evaluate_dataset(predictions, ground_truth, t, keys)
        rows.append({"threshold": round(float(t), 10), "dice": rep.summary["dice"]["mean"]})
    best = max(rows, key=lambda r: r["dice"])
    return {"per_threshold": rows, "best": best}


def parse_sweep(spec: str) -> list[float]:
    """``"0.1:0.9:0.1"`` -> [0.1, 0.2, ..., 0.9]."""
    a, b, step = (float(v) for v in spec.split(":"))
    if step <= 0 or b < a:
        raise BadThreshold(f"bad sweep {spec!r}")
    n = int(math.floor((b - a) / step + 1e-9)) + 1
    return [round(a + i * step, 10) for i in range(n)]


# ---------------------------------------------------------------------------
# overlays

HIGHLIGHT = np.array([255.0, 40.0, 40.0])
CONTOUR = np.array([255.0, 255.0, 0.0])
ALPHA = 0.5


def render_overlay(image, overlay, out_path) -> Path:
    """Grayscale image with ``overlay`` blended in red; masks also get a yellow contour."""
    from PIL import Image

    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    is_mask = isinstance(overlay, SegmentationMask)
    ov = np.clip(_values(overlay).astype(np.float64), 0.0, 1.0)
    if ov.shape != img.shape:
        raise ShapeMismatch(f"image {img.shape} vs overlay {ov.shape}")
    gray = np.round(img * 255.0)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    a = (ALPHA * ov)[..., None]
    rgb = np.where(a > 0, np.round((1 - a) * rgb + a * HIGHLIGHT), rgb)
    if is_mask:
        rgb[boundary(ov > 0)] = CONTOUR
    out_path = _writable(out_path)
    try:
        Image.fromarray(rgb.astype(np.uint8), mode="RGB").save(out_path, format="PNG")
    except OSError as exc:
        raise UnwritablePath(str(out_path)) from exc
    return out_path


def render_grayscale(image, out_path) -> Path:
    """The plain image as an RGB PNG, i.e. ``render_overlay`` with nothing blended."""
    return render_overlay(image, np.zeros(np.shape(image)), out_path)
