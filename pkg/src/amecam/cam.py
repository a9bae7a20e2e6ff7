"""Class activation maps: per-exit CAMs, normalization, upsampling, Avg. ME, Grad-CAM.

Single-map operations work on numpy arrays in float64.  ``exit_cams`` is the
batched torch path used during training and export; it applies the same
steps (weighted channel sum, ReLU, min-max, corner-aligned bilinear
upsampling, min-max again).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import (
    BadTargetSize,
    ChannelMismatch,
    EmptyList,
    GradientUnavailable,
    MixedResolutions,
    NonFiniteInput,
)
from .model import ExitHead, MultiExitNet, _as_batch

SOURCES = ("exit1", "exit2", "exit3", "exit4", "averaged", "attentive", "gradcam")


@dataclass
class ActivationMap:
    values: np.ndarray
    source: str
    native_resolution: tuple[int, int]

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.values.shape)  # type: ignore[return-value]


def minmax_normalize(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise NonFiniteInput("map contains NaN/Inf")
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.zeros_like(m)
    out = (m - lo) / (hi - lo)
    # division can land a hair outside [0, 1]
    return np.clip(out, 0.0, 1.0)


def compute_exit_cam(features, head: ExitHead, target_class: int = 1) -> ActivationMap:
    """ReLU of the head-weighted channel sum, min-max normalized, at native resolution."""
    f = features.detach().cpu().double().numpy() if isinstance(features, torch.Tensor) else np.asarray(features, np.float64)
    if f.ndim == 4 and f.shape[0] == 1:
        f = f[0]
    if f.ndim != 3 or f.shape[0] != head.weight.shape[1]:
        raise ChannelMismatch(f"features {f.shape} do not match head weight {head.weight.shape}")
    if not 0 <= target_class < head.weight.shape[0]:
        raise ChannelMismatch(f"target_class {target_class} out of range")
    raw = np.tensordot(head.weight[target_class], f, axes=(0, 0))
    cam = minmax_normalize(np.maximum(raw, 0.0))
    return ActivationMap(cam, f"exit{head.exit_index}", tuple(cam.shape))


def _interp_axis(m: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = m.shape[axis]
    if n_in == n_out:
        return m
    if n_in == 1:
        return np.repeat(m, n_out, axis=axis)
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(np.floor(pos).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = pos - i0
    a = np.take(m, i0, axis=axis)
    b = np.take(m, i1, axis=axis)
    shape = [1] * m.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape)
    return a * (1.0 - frac) + b * frac


def upsample_map(m, target: Sequence[int]) -> np.ndarray:
    """Corner-aligned bilinear interpolation to ``target`` = (H, W)."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or min(m.shape) < 1:
        raise BadTargetSize(f"expected a non-empty 2D map, got {m.shape}")
    H, W = int(target[0]), int(target[1])
    if H < m.shape[0] or W < m.shape[1]:
        raise BadTargetSize(f"target {(H, W)} smaller than source {m.shape}")
    out = _interp_axis(_interp_axis(m, H, 0), W, 1)
    if m.min() >= 0.0 and m.max() <= 1.0:
        out = np.clip(out, 0.0, 1.0)
    return out


def _ordered_sum(terms: np.ndarray) -> np.ndarray:
    # sorting along the exit axis makes the float sum independent of input order
    terms = np.sort(terms, axis=0)
    acc = terms[0].copy()
    for t in terms[1:]:
        acc += t
    return acc


def average_aggregate(cams: Sequence) -> ActivationMap:
    """Avg. ME: pixel-wise mean of the exit CAMs, then min-max."""
    if len(cams) == 0:
        raise EmptyList("no maps to aggregate")
    arrs = [np.asarray(c.values if isinstance(c, ActivationMap) else c, np.float64) for c in cams]
    if len({a.shape for a in arrs}) != 1:
        raise MixedResolutions(f"maps have different shapes: {[a.shape for a in arrs]}")
    mean = _ordered_sum(np.stack(arrs)) / len(arrs)
    return ActivationMap(minmax_normalize(mean), "averaged", tuple(mean.shape))


def grad_cam_reference(image, model: MultiExitNet, target_class: int = 1) -> ActivationMap:
    """Grad-CAM on the exit-4 features, channel weights from GAP of the gradient."""
    x = _as_batch(image, model.config.input_size)[:1]
    x = x.to(next(model.parameters()).dtype)
    with torch.enable_grad():
        out = model(x)
        feats = out.features[-1]
        if not feats.requires_grad:
            raise GradientUnavailable("exit-4 features are detached from the graph")
        score = out.logits[-1][0, target_class]
        (grad,) = torch.autograd.grad(score, feats)
    alpha = grad[0].double().mean(dim=(1, 2))
    fmap = feats[0].detach().double()
    raw = torch.relu(torch.einsum("c,chw->hw", alpha, fmap)).numpy()
    cam = minmax_normalize(raw)
    return ActivationMap(cam, "gradcam", tuple(cam.shape))


# ---------------------------------------------------------------------------
# batched path


def _minmax_batch(m: torch.Tensor) -> torch.Tensor:
    """Per-map min-max over the last two dims; constant maps become zero."""
    flat = m.flatten(-2)
    lo = flat.min(dim=-1).values[..., None, None]
    hi = flat.max(dim=-1).values[..., None, None]
    rng = hi - lo
    safe = torch.where(rng > 0, rng, torch.ones_like(rng))
    out = torch.where(rng > 0, (m - lo) / safe, torch.zeros_like(m))
    return out.clamp(0.0, 1.0)


@torch.no_grad()
def exit_cams(model: MultiExitNet, images: torch.Tensor, target_class: int = 1) -> torch.Tensor:
    """B x K x S x S stack of exit CAMs at input resolution, in float64."""
    x = _as_batch(images, model.config.input_size)
    out = model(x.to(next(model.parameters()).dtype))
    size = x.shape[-2:]
    maps = []
    for k, feats in enumerate(out.features):
        w = model.heads[k].weight[target_class].double()
        raw = torch.relu(torch.einsum("c,bchw->bhw", w, feats.double()))
        cam = _minmax_batch(raw)[:, None]
        if cam.shape[-2:] != size:
            cam = F.interpolate(cam, size=tuple(size), mode="bilinear", align_corners=True)
        maps.append(_minmax_batch(cam[:, 0]))
    return torch.stack(maps, dim=1)


def upsampled_exit_cams(features: Sequence, heads: Sequence[ExitHead], size: Sequence[int], target_class: int = 1) -> list[ActivationMap]:
    """numpy reference for ``exit_cams`` on one image."""
    cams = []
    for f, head in zip(features, heads):
        native = compute_exit_cam(f, head, target_class)
        values = minmax_normalize(upsample_map(native.values, size))
        cams.append(ActivationMap(values, native.source, native.native_resolution))
    return cams


# ---------------------------------------------------------------------------
# export


def save_map(values: np.ndarray, out_dir, stem: str, meta: dict) -> Path:
    """float32 row-major payload plus JSON sidecar; returns the sidecar path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    values = np.ascontiguousarray(values, dtype="<f4")
    values.tofile(out_dir / f"{stem}.bin")
    sidecar = {"shape": list(values.shape), "dtype": "f32", **meta}
    path = out_dir / f"{stem}.json"
    path.write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    return path


def save_cam(cam: ActivationMap, out_dir, case_id: str, z_index: int, png: bool = False) -> Path:
    stem = f"{case_id}_z{z_index:04d}"
    path = save_map(
        cam.values,
        out_dir,
        stem,
        {
            "source": cam.source,
            "case_id": case_id,
            "z_index": int(z_index),
            "native_resolution": list(cam.native_resolution),
        },
    )
    if png:
        from PIL import Image

        img = np.round(np.clip(cam.values, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(img, mode="L").save(Path(out_dir) / f"{stem}.png")
    return path


def load_map(sidecar_path) -> tuple[np.ndarray, dict]:
    sidecar_path = Path(sidecar_path)
    meta = json.loads(sidecar_path.read_text())
    values = np.fromfile(sidecar_path.with_suffix(".bin"), dtype="<f4").reshape(meta["shape"])
    return values, meta


def load_cam_dir(cam_dir) -> dict[tuple[str, int], tuple[ActivationMap, dict]]:
    out = {}
    for p in sorted(Path(cam_dir).glob("*.json")):
        values, meta = load_map(p)
        if "case_id" not in meta or len(meta["shape"]) != 2:
            continue  # attention fields and foreign sidecars
        cam = ActivationMap(values.astype(np.float64), meta.get("source", "unknown"), tuple(meta.get("native_resolution", values.shape)))
        out[(meta["case_id"], int(meta["z_index"]))] = (cam, meta)
    return out
