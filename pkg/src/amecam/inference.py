"""Produce activation maps for a slice set under any of the CLI modes."""

from __future__ import annotations

import numpy as np
import torch

from .aggregation import AttentionField, attentive_aggregate
from .cam import ActivationMap, average_aggregate, exit_cams, grad_cam_reference, minmax_normalize, upsample_map
from .training import Checkpoint, SliceSet

MODES = ("exit1", "exit2", "exit3", "exit4", "avg", "attentive", "gradcam")


def predict_maps(ckpt: Checkpoint, data: SliceSet, mode: str, batch_size: int = 64) -> dict[tuple[str, int], ActivationMap]:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    model = ckpt.build_model()
    cfg = model.config
    size = (cfg.input_size, cfg.input_size)
    keys = list(zip(data.case_ids, data.z_index))
    out: dict[tuple[str, int], ActivationMap] = {}

    if mode == "gradcam":
        for i, key in enumerate(keys):
            native = grad_cam_reference(data.images[i, 0], model, target_class=1)
            values = minmax_normalize(upsample_map(native.values, size))
            out[key] = ActivationMap(values, "gradcam", native.native_resolution)
        return out

    att = None
    if mode == "attentive":
        att, _ = ckpt.build_attention()
    for start in range(0, len(keys), batch_size):
        x = data.images[start : start + batch_size]
        cams = exit_cams(model, x).numpy()
        if att is not None:
            with torch.no_grad():
                w = att(x, torch.from_numpy(cams).float()).double().numpy()
        for j in range(len(x)):
            key = keys[start + j]
            if mode.startswith("exit"):
                k = int(mode[-1])
                native = cfg.exit_size(k)
                out[key] = ActivationMap(cams[j, k - 1], mode, (native, native))
            elif mode == "avg":
                out[key] = average_aggregate(list(cams[j]))
            else:
                out[key] = attentive_aggregate(list(cams[j]), AttentionField(w[j]))
    return out


def ground_truth(data: SliceSet) -> dict[tuple[str, int], np.ndarray]:
    return {(c, z): data.masks[i].numpy() for i, (c, z) in enumerate(zip(data.case_ids, data.z_index))}
