"""ResNet-18 style backbone with a GAP + linear classifier after each stage."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NoPositivePair, NonFiniteActivation, ShapeMismatch, UnnormalizedEmbedding

NUM_EXITS = 4


@dataclass
class BackboneConfig:
    stage_channels: list[int] = field(default_factory=lambda: [64, 128, 256, 512])
    num_classes: int = 2
    input_size: int = 128
    num_exits: int = NUM_EXITS
    projector_dim: int = 64
    blocks_per_stage: int = 2

    def __post_init__(self):
        self.stage_channels = [int(c) for c in self.stage_channels]
        if self.num_exits != NUM_EXITS or len(self.stage_channels) != NUM_EXITS:
            raise ValueError(f"exactly {NUM_EXITS} stages/exits are supported")
        # stem divides by 4, stages 2..4 by 2 each
        if self.input_size % 32 != 0:
            raise ValueError(f"input_size must be divisible by 32, got {self.input_size}")

    def exit_size(self, k: int) -> int:
        """Spatial side of exit ``k`` (1-based)."""
        return self.input_size // 2 ** (k + 1)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ExitHead:
    exit_index: int  # 1-based
    weight: np.ndarray  # num_classes x C_k
    bias: np.ndarray  # num_classes

    @classmethod
    def from_linear(cls, k: int, linear: nn.Linear) -> "ExitHead":
        return cls(
            exit_index=k,
            weight=linear.weight.detach().cpu().double().numpy().copy(),
            bias=linear.bias.detach().cpu().double().numpy().copy(),
        )


@dataclass
class MultiExitOutput:
    features: list[torch.Tensor]  # K tensors, B x C_k x H_k x W_k
    logits: list[torch.Tensor]  # K tensors, B x num_classes


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class MultiExitNet(nn.Module):
    """Four residual stages, each followed by an internal classifier.

    The head of exit ``k`` is ``GAP -> Linear(C_k, num_classes)`` so that its
    weights double as CAM channel weights.  ``projector`` maps pooled exit-4
    features to a unit-norm embedding used only for contrastive pretraining.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        ch = config.stage_channels
        self.stem = nn.Sequential(
            nn.Conv2d(1, ch[0], 7, 2, 3, bias=False),
            nn.BatchNorm2d(ch[0]),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, 2, 1),
        )
        stages = []
        in_ch = ch[0]
        for i, out_ch in enumerate(ch):
            stride = 1 if i == 0 else 2
            blocks = [BasicBlock(in_ch, out_ch, stride)]
            blocks += [BasicBlock(out_ch, out_ch) for _ in range(config.blocks_per_stage - 1)]
            stages.append(nn.Sequential(*blocks))
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)
        self.heads = nn.ModuleList(nn.Linear(c, config.num_classes) for c in ch)
        self.projector = nn.Sequential(
            nn.Linear(ch[-1], ch[-1]),
            nn.ReLU(inplace=True),
            nn.Linear(ch[-1], config.projector_dim),
        )

        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def forward(self, x: torch.Tensor) -> MultiExitOutput:
        feats, logits = [], []
        h = self.stem(x)
        for stage, head in zip(self.stages, self.heads):
            h = stage(h)
            feats.append(h)
            logits.append(head(h.mean(dim=(2, 3))))
        return MultiExitOutput(features=feats, logits=logits)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Unit-norm projection of pooled exit-4 features."""
        h = self.stem(x)
        for stage in self.stages:
            h = stage(h)
        return F.normalize(self.projector(h.mean(dim=(2, 3))), dim=1)

    def exit_head(self, k: int) -> ExitHead:
        return ExitHead.from_linear(k, self.heads[k - 1])

    def backbone_parameters(self):
        """Everything except the contrastive projector."""
        for name, p in self.named_parameters():
            if not name.startswith("projector."):
                yield p


def _as_batch(image, input_size: int) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(image) if not isinstance(image, torch.Tensor) else image)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1] != 1 or tuple(x.shape[-2:]) != (input_size, input_size):
        raise ShapeMismatch(f"expected ({input_size}, {input_size}) images, got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ShapeMismatch("input image contains NaN/Inf")
    return x.float()


def forward_multi_exit(image, model: MultiExitNet) -> MultiExitOutput:
    """Run ``model`` in its current mode on one H x W image or a batch.

    Accepts ``H x W``, ``B x H x W`` or ``B x 1 x H x W``; outputs keep the
    batch dimension.
    """
    x = _as_batch(image, model.config.input_size)
    x = x.to(next(model.parameters()).dtype)
    out = model(x)
    for t in out.features + out.logits:
        if not torch.isfinite(t).all():
            raise NonFiniteActivation("non-finite values in multi-exit outputs")
    return out


def multi_exit_ce_loss(outputs, labels) -> torch.Tensor:
    """Sum over exits of softmax cross-entropy, averaged over the batch.

    ``outputs`` is a :class:`MultiExitOutput` or a plain sequence of logit
    tensors; ``labels`` an int or a 1-D tensor of class ids.
    """
    logits: Sequence[torch.Tensor] = outputs.logits if isinstance(outputs, MultiExitOutput) else outputs
    logits = [z if z.ndim == 2 else z[None] for z in logits]
    target = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    target = target.expand(logits[0].shape[0]) if target.numel() == 1 else target
    total = logits[0].new_zeros(())
    for z in logits:
        total = total + F.cross_entropy(z, target)
    return total


def supcon_loss(embeddings: torch.Tensor, labels, temperature: float = 0.07) -> torch.Tensor:
    """Supervised contrastive loss summed over anchors.

    For anchor i with positives P(i):
    ``-1/|P(i)| * sum_p log( exp(z_i.z_p / t) / sum_{a != i} exp(z_i.z_a / t) )``.
    """
    z = torch.as_tensor(embeddings)
    labels = torch.as_tensor(labels).reshape(-1)
    n = z.shape[0]
    if n < 2:
        raise NoPositivePair("need at least two embeddings")
    norms = z.detach().norm(dim=1)
    if torch.any((norms - 1).abs() > 1e-6):
        raise UnnormalizedEmbedding(f"embedding norms deviate from 1 by up to {(norms - 1).abs().max():.3g}")

    eye = torch.eye(n, dtype=torch.bool, device=z.device)
    positives = (labels[:, None] == labels[None, :]) & ~eye
    n_pos = positives.sum(dim=1)
    if torch.any(n_pos == 0):
        raise NoPositivePair("some anchor has no same-class partner in the batch")

    sim = z @ z.T / temperature
    sim = sim.masked_fill(eye, float("-inf"))
    log_prob = sim - torch.logsumexp(sim, dim=1, keepdim=True)
    log_prob = log_prob.masked_fill(~positives, 0.0)
    per_anchor = -log_prob.sum(dim=1) / n_pos
    return per_anchor.sum()
