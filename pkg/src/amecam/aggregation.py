"""Pixel-wise attention over exit CAMs and the contrastive fg/bg objective."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .cam import ActivationMap, _ordered_sum, minmax_normalize, save_map
from .errors import BatchTooSmall, ResolutionMismatch, ShapeMismatch

LOSSES = ("c2am", "cross_entropy")
FEATURE_SOURCES = ("exit4", "all_exits", "hypercolumn")


@dataclass
class AggregationConfig:
    loss: str = "c2am"
    epsilon: float = 1e-6
    freeze_backbone: bool = True
    attention_hidden: int = 32
    embed_dim: int = 64
    train_projector: bool = True
    feature_source: str = "exit4"  # "exit4" | "all_exits" | "hypercolumn" (image + all exits)

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.feature_source not in FEATURE_SOURCES:
            raise ValueError(f"unknown feature_source {self.feature_source!r}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttentionField:
    weights: np.ndarray  # K x H x W

    def __post_init__(self):
        w = self.weights
        if w.ndim != 3:
            raise ShapeMismatch(f"attention weights must be K x H x W, got {w.shape}")


@dataclass
class FgBgEmbedding:
    """Batched fg/bg pooled embeddings: ``fg``/``bg`` are B x d, masses B."""

    fg: torch.Tensor
    bg: torch.Tensor
    fg_mass: torch.Tensor
    bg_mass: torch.Tensor

    def __len__(self):
        return self.fg.shape[0]


class AttentionNet(nn.Module):
    """Three 3x3 convs over [image; cam_1..cam_K] -> K logit maps -> softmax over exits.

    The last layer starts at zero so an untrained net yields uniform weights,
    i.e. exactly Avg. ME.
    """

    def __init__(self, num_exits: int = 4, hidden: int = 32):
        super().__init__()
        self.num_exits = num_exits
        self.body = nn.Sequential(
            nn.Conv2d(1 + num_exits, hidden, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.ReLU(inplace=True),
        )
        self.out = nn.Conv2d(hidden, num_exits, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def logits(self, image: torch.Tensor, cams: torch.Tensor) -> torch.Tensor:
        return self.out(self.body(torch.cat([image, cams], dim=1)))

    def forward(self, image: torch.Tensor, cams: torch.Tensor) -> torch.Tensor:
        """B x 1 x H x W image, B x K x H x W cams -> B x K x H x W weights."""
        if image.shape[-2:] != cams.shape[-2:]:
            raise ResolutionMismatch(f"image {tuple(image.shape)} vs cams {tuple(cams.shape)}")
        return torch.softmax(self.logits(image, cams), dim=1)


class PixelProjector(nn.Module):
    """1x1 projection of backbone features to unit-norm pixel embeddings at ``size``.

    With several feature maps (one per exit) each gets its own 1x1 projection;
    the projections are upsampled and summed, which equals one 1x1 conv over
    the upsampled channel concatenation.
    """

    def __init__(self, in_channels, dim: int = 64):
        super().__init__()
        chans = [in_channels] if isinstance(in_channels, int) else list(in_channels)
        self.proj = nn.ModuleList(nn.Conv2d(c, dim, 1) for c in chans)

    def forward(self, feats, size) -> torch.Tensor:
        feats = [feats] if isinstance(feats, torch.Tensor) else list(feats)
        total = 0
        for conv, f in zip(self.proj, feats):
            total = total + F.interpolate(conv(f), size=tuple(size), mode="bilinear", align_corners=True)
        return F.normalize(total, dim=1)


def attention_forward(image, cams, net: AttentionNet) -> AttentionField:
    """Single-image convenience wrapper: H x W image, K x H x W cams."""
    img = torch.as_tensor(np.asarray(image, np.float32) if not isinstance(image, torch.Tensor) else image)
    cam_t = torch.as_tensor(np.asarray(cams, np.float32) if not isinstance(cams, torch.Tensor) else cams)
    if img.ndim != 2 or cam_t.ndim != 3 or tuple(cam_t.shape[1:]) != tuple(img.shape):
        raise ResolutionMismatch(f"image {tuple(img.shape)} and cams {tuple(cam_t.shape)} disagree")
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        w = net(img[None, None].to(dtype), cam_t[None].to(dtype))[0]
    return AttentionField(w.double().numpy())


def attentive_aggregate(cams, att: AttentionField) -> ActivationMap:
    arrs = np.stack([np.asarray(c.values if isinstance(c, ActivationMap) else c, np.float64) for c in cams])
    w = np.asarray(att.weights, np.float64)
    if arrs.shape != w.shape:
        raise ShapeMismatch(f"cams {arrs.shape} vs attention {w.shape}")
    fused = _ordered_sum(w * arrs)
    return ActivationMap(minmax_normalize(fused), "attentive", tuple(fused.shape))


def save_attention(att: AttentionField, out_dir, case_id: str, z_index: int):
    """K-channel float32 dump of an attention field (debugging aid)."""
    stem = f"{case_id}_z{z_index:04d}_attention"
    return save_map(att.weights, out_dir, stem, {"source": "attention", "case_id": case_id, "z_index": int(z_index)})


def fuse_batch(cams: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Differentiable B x H x W convex combination (not normalized)."""
    return (weights * cams).sum(dim=1)


def fg_bg_embed(agg_map: torch.Tensor, proj_features: torch.Tensor, epsilon: float = 1e-6) -> FgBgEmbedding:
    """Mask-weighted mean of pixel features for fg (M) and bg (1 - M), unit-normalized.

    Accepts H x W / d x H x W or batched B x H x W / B x d x H x W.
    """
    M = torch.as_tensor(agg_map)
    f = torch.as_tensor(proj_features)
    if M.ndim == 2:
        M, f = M[None], f[None]
    if M.shape[0] != f.shape[0] or M.shape[-2:] != f.shape[-2:]:
        raise ShapeMismatch(f"map {tuple(M.shape)} vs features {tuple(f.shape)}")
    M = M.to(f.dtype)
    fg_mass = M.sum(dim=(1, 2))
    bg_mass = (1 - M).sum(dim=(1, 2))
    fg_sum = torch.einsum("bhw,bdhw->bd", M, f)
    bg_sum = torch.einsum("bhw,bdhw->bd", 1 - M, f)
    fg = fg_sum / fg_mass.clamp_min(epsilon)[:, None]
    bg = bg_sum / bg_mass.clamp_min(epsilon)[:, None]
    floor = epsilon * M.shape[-1] * M.shape[-2]
    if bool((fg_mass.detach() < floor).any() or (bg_mass.detach() < floor).any()):
        warnings.warn("fg or bg mass below epsilon * H * W; pooled embedding is degenerate", RuntimeWarning, stacklevel=2)
    return FgBgEmbedding(
        fg=F.normalize(fg, dim=1, eps=epsilon),
        bg=F.normalize(bg, dim=1, eps=epsilon),
        fg_mass=fg_mass,
        bg_mass=bg_mass,
    )


def _sim01(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarity rescaled to [0, 1]; B x B."""
    u = F.normalize(u, dim=1)
    v = F.normalize(v, dim=1)
    return (u @ v.T + 1) / 2


def _clamped_log(x: torch.Tensor, epsilon: float) -> torch.Tensor:
    # log(x + eps) capped at 0 so every term stays non-negative
    return torch.log(torch.clamp(x + epsilon, max=1.0))


def c2am_loss(batch: FgBgEmbedding, epsilon: float = 1e-6) -> torch.Tensor:
    """Pull fg embeddings together, bg together, push every fg away from every bg."""
    B = len(batch)
    if B < 2:
        raise BatchTooSmall(f"c2am_loss needs at least 2 samples, got {B}")
    neg = -_clamped_log(1 - _sim01(batch.fg, batch.bg), epsilon).mean()
    iu = torch.triu_indices(B, B, offset=1)
    pos_fg = -_clamped_log(_sim01(batch.fg, batch.fg)[iu[0], iu[1]], epsilon).mean()
    pos_bg = -_clamped_log(_sim01(batch.bg, batch.bg)[iu[0], iu[1]], epsilon).mean()
    return pos_fg + pos_bg + neg


class MapClassifier(nn.Module):
    """Linear head on the global average of an aggregated map (CE ablation arm)."""

    def __init__(self, num_classes: int = 2):
        super().__init__()
        self.linear = nn.Linear(1, num_classes)

    def forward(self, agg_map: torch.Tensor) -> torch.Tensor:
        return self.linear(agg_map.mean(dim=(-2, -1))[..., None])


def aggregation_ce_loss(agg_map: torch.Tensor, gt_label, head: MapClassifier) -> torch.Tensor:
    M = torch.as_tensor(agg_map)
    if M.ndim == 2:
        M = M[None]
    target = torch.as_tensor(gt_label, dtype=torch.long).reshape(-1)
    target = target.expand(M.shape[0]) if target.numel() == 1 else target
    return F.cross_entropy(head(M.to(head.linear.weight.dtype)), target)
