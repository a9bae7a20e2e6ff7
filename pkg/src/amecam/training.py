"""Three training phases: SupCon pretraining, multi-exit fine-tuning, attention aggregation.

All randomness flows from ``PhaseConfig.seed`` through explicit generators,
and torch runs in deterministic mode, so equal seeds give equal checkpoints.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import yaml

from .aggregation import (
    AggregationConfig,
    AttentionNet,
    MapClassifier,
    PixelProjector,
    aggregation_ce_loss,
    c2am_loss,
    fg_bg_embed,
    fuse_batch,
)
from .cam import exit_cams
from .data import DatasetManifest, load_volume, slice_volume
from .errors import BadStep, IncompatibleCheckpoint, MissingFile, SamplerInfeasible
from .model import BackboneConfig, MultiExitNet, multi_exit_ce_loss, supcon_loss

log = logging.getLogger(__name__)

PHASES = ("pretrain", "multi_exit", "aggregation")
DEFAULT_OPTIMIZER = {"pretrain": "adam", "multi_exit": "adam", "aggregation": "sgd"}


@dataclass
class PhaseConfig:
    phase: str
    lr_init: float = 1e-4
    lr_min: float = 5e-6
    weight_decay: float = 1e-5
    optimizer: Optional[str] = None
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    temperature: float = 0.07
    sgd_momentum: float = 0.9
    accuracy_target: float = 0.9
    min_epochs: int = 0  # accuracy-based early stop is not checked before this many epochs
    optimizer_override: bool = field(default=False, init=False)

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")
        default = DEFAULT_OPTIMIZER[self.phase]
        if self.optimizer is None:
            self.optimizer = default
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        self.optimizer_override = self.optimizer != default
        if self.lr_min > self.lr_init:
            raise ValueError("lr_min must not exceed lr_init")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.phase in ("pretrain", "aggregation") and self.batch_size < 2:
            raise ValueError("contrastive phases need batch_size >= 2")

    @classmethod
    def from_dict(cls, phase: str, d: Optional[dict]) -> "PhaseConfig":
        d = dict(d or {})
        d.pop("phase", None)
        d.pop("optimizer_override", None)
        known = {f.name for f in fields(cls) if f.init}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown keys in [{phase}] section: {sorted(unknown)}")
        return cls(phase=phase, **d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunConfig:
    """Everything a config file describes."""

    backbone: BackboneConfig
    attention: AggregationConfig
    pretrain: PhaseConfig
    multi_exit: PhaseConfig
    aggregation: PhaseConfig
    manifest: Optional[str] = None
    data_dir: Optional[str] = None

    @classmethod
    def from_dict(cls, d: dict, base_dir: Optional[Path] = None) -> "RunConfig":
        data = dict(d.get("data") or {})

        def _path(p):
            if p is None or base_dir is None or Path(p).is_absolute():
                return p
            return str((base_dir / p).resolve())

        seed = d.get("seed")
        phases = {}
        for name in PHASES:
            section = dict(d.get(name) or {})
            if seed is not None:
                section.setdefault("seed", seed)
            phases[name] = PhaseConfig.from_dict(name, section)
        return cls(
            backbone=BackboneConfig(**(d.get("backbone") or {})),
            attention=AggregationConfig(**(d.get("attention") or {})),
            manifest=_path(data.get("manifest")),
            data_dir=_path(data.get("data_dir")),
            **phases,
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise MissingFile(str(path))
        return cls.from_dict(yaml.safe_load(path.read_text()) or {}, base_dir=path.parent)

    def to_dict(self) -> dict:
        return {
            "data": {"manifest": self.manifest, "data_dir": self.data_dir},
            "backbone": self.backbone.to_dict(),
            "attention": self.attention.to_dict(),
            **{name: getattr(self, name).to_dict() for name in PHASES},
        }


# ---------------------------------------------------------------------------
# schedule


def cosine_lr(t: int, total: int, lr_init: float = 1e-4, lr_min: float = 5e-6) -> float:
    if total < 1 or not 0 <= t <= total:
        raise BadStep(f"need 0 <= t <= T and T >= 1, got t={t}, T={total}")
    return lr_min + (lr_init - lr_min) * (1 + math.cos(math.pi * t / total)) / 2


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: dict[str, torch.Tensor]
    phase: str
    epoch: int
    seed: int
    config: dict
    metrics: list[dict] = field(default_factory=list)

    @property
    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(**self.config["backbone"])

    @property
    def attention_config(self) -> AggregationConfig:
        return AggregationConfig(**self.config.get("attention", {}))

    def _group(self, prefix: str) -> dict[str, torch.Tensor]:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def build_model(self) -> MultiExitNet:
        model = MultiExitNet(self.backbone_config)
        model.load_state_dict(self._group("backbone"))
        model.eval()
        return model

    def has_attention(self) -> bool:
        return any(k.startswith("attention.") for k in self.params)

    def build_attention(self) -> tuple[AttentionNet, PixelProjector]:
        if not self.has_attention():
            raise IncompatibleCheckpoint(f"checkpoint from phase {self.phase!r} carries no attention parameters")
        acfg = self.attention_config
        bcfg = self.backbone_config
        att = AttentionNet(bcfg.num_exits, acfg.attention_hidden)
        att.load_state_dict(self._group("attention"))
        proj = _projector(bcfg, acfg)
        proj.load_state_dict(self._group("projector"))
        att.eval()
        proj.eval()
        return att, proj

    def save(self, path) -> None:
        meta = {
            "phase": self.phase,
            "epoch": self.epoch,
            "seed": self.seed,
            "config": self.config,
            "metrics": self.metrics,
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        params = {k: v.detach().cpu().clone() for k, v in sorted(self.params.items())}
        torch.save({"params": params, "metadata": json.dumps(meta, sort_keys=True)}, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise MissingFile(str(path))
        blob = torch.load(path, map_location="cpu", weights_only=True)
        meta = json.loads(blob["metadata"])
        return cls(params=blob["params"], **meta)


def _projector(bcfg: BackboneConfig, acfg: AggregationConfig) -> PixelProjector:
    if acfg.feature_source == "hypercolumn":
        return PixelProjector([1] + bcfg.stage_channels, acfg.embed_dim)
    if acfg.feature_source == "all_exits":
        return PixelProjector(bcfg.stage_channels, acfg.embed_dim)
    return PixelProjector(bcfg.stage_channels[-1], acfg.embed_dim)


def _select_features(image, features, acfg: AggregationConfig):
    if acfg.feature_source == "hypercolumn":
        return [image] + list(features)
    if acfg.feature_source == "all_exits":
        return list(features)
    return [features[-1]]


def _state(prefix: str, module: nn.Module) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v.detach().clone() for k, v in module.state_dict().items()}


def params_hash(params: dict[str, torch.Tensor], prefix: str = "backbone") -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        if k.startswith(prefix + "."):
            h.update(k.encode())
            h.update(params[k].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def init_checkpoint(config: RunConfig, seed: int = 0) -> Checkpoint:
    torch.manual_seed(seed)
    model = MultiExitNet(config.backbone)
    return Checkpoint(
        params=_state("backbone", model),
        phase="init",
        epoch=0,
        seed=seed,
        config=config.to_dict(),
    )


# ---------------------------------------------------------------------------
# data


@dataclass
class SliceSet:
    images: torch.Tensor  # N x 1 x S x S float32
    labels: torch.Tensor  # N int64
    masks: torch.Tensor  # N x S x S uint8
    case_ids: list[str]
    z_index: list[int]

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "SliceSet":
        idx = [int(i) for i in idx]
        return SliceSet(
            self.images[idx],
            self.labels[idx],
            self.masks[idx],
            [self.case_ids[i] for i in idx],
            [self.z_index[i] for i in idx],
        )


def _resize(img: np.ndarray, size: int, mode: str) -> np.ndarray:
    if img.shape == (size, size):
        return img
    t = torch.as_tensor(img, dtype=torch.float64)[None, None]
    if mode == "nearest":
        out = F.interpolate(t, size=(size, size), mode="nearest")
    else:
        out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=True)
    return out[0, 0].numpy()


def load_split(manifest: DatasetManifest, split: str, input_size: int, data_dir=None) -> SliceSet:
    """Slices of every case in ``split``, resized to ``input_size`` when needed."""
    data_dir = Path(data_dir or manifest.data_dir or ".")
    want = {(e.case_id, e.z_index) for e in manifest.select(split)}
    images, labels, masks, cids, zs = [], [], [], [], []
    for cid in manifest.cases(split):
        path = data_dir / f"{cid}.json"
        if not path.exists():
            nii = [data_dir / f"{cid}.nii.gz", data_dir / f"{cid}.nii"]
            path = next((p for p in nii if p.exists()), path)
        vol = load_volume(path)
        for s in slice_volume(vol):
            if (cid, s.z_index) not in want:
                continue
            images.append(_resize(s.image, input_size, "bilinear").astype(np.float32))
            gt = s.gt_mask if s.gt_mask is not None else np.zeros(s.image.shape, np.uint8)
            masks.append((_resize(gt.astype(np.float64), input_size, "nearest") > 0.5).astype(np.uint8))
            labels.append(s.label if s.label is not None else 0)
            cids.append(cid)
            zs.append(s.z_index)
    if not images:
        return SliceSet(
            torch.zeros(0, 1, input_size, input_size),
            torch.zeros(0, dtype=torch.long),
            torch.zeros(0, input_size, input_size, dtype=torch.uint8),
            [],
            [],
        )
    return SliceSet(
        torch.from_numpy(np.stack(images))[:, None],
        torch.as_tensor(labels, dtype=torch.long),
        torch.from_numpy(np.stack(masks)),
        cids,
        zs,
    )


# ---------------------------------------------------------------------------
# helpers


def _deterministic():
    torch.use_deterministic_algorithms(True)


def _optimizer(cfg: PhaseConfig, params) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr_init, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(params, lr=cfg.lr_init, momentum=cfg.sgd_momentum, weight_decay=cfg.weight_decay)


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


def _batches(n: int, batch_size: int, gen: torch.Generator):
    perm = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        yield perm[i : i + batch_size]


def balanced_batches(labels: torch.Tensor, batch_size: int, gen: torch.Generator):
    """Batches holding an equal share of each class; the minority class is cycled."""
    classes = sorted(set(labels.tolist()))
    pools = {c: (labels == c).nonzero().flatten() for c in classes}
    for c, pool in pools.items():
        if len(pool) < 2:
            raise SamplerInfeasible(f"class {c} has {len(pool)} sample(s); need at least 2")
    per_class = max(1, batch_size // len(classes))
    n_batches = max(1, math.ceil(len(labels) / (per_class * len(classes))))
    streams = {}
    for c, pool in pools.items():
        reps = math.ceil(n_batches * per_class / len(pool))
        streams[c] = torch.cat([pool[torch.randperm(len(pool), generator=gen)] for _ in range(reps)])
    for b in range(n_batches):
        yield torch.cat([streams[c][b * per_class : (b + 1) * per_class] for c in classes])


def augment(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Random horizontal flip, crop-resize (70-100% side) and intensity jitter."""
    B, _, H, W = x.shape
    out = torch.empty_like(x)
    flips = torch.rand(B, generator=gen) < 0.5
    scales = 0.7 + 0.3 * torch.rand(B, generator=gen)
    offs = torch.rand(B, 2, generator=gen)
    gains = 0.9 + 0.2 * torch.rand(B, generator=gen)
    shifts = -0.05 + 0.1 * torch.rand(B, generator=gen)
    for i in range(B):
        img = x[i : i + 1]
        if flips[i]:
            img = img.flip(-1)
        ch, cw = max(2, int(H * scales[i])), max(2, int(W * scales[i]))
        y0 = int((H - ch) * offs[i, 0])
        x0 = int((W - cw) * offs[i, 1])
        img = img[..., y0 : y0 + ch, x0 : x0 + cw]
        img = F.interpolate(img, size=(H, W), mode="bilinear", align_corners=True)
        out[i] = (img[0] * gains[i] + shifts[i]).clamp(0.0, 1.0)
    return out


@torch.no_grad()
def exit_accuracy(model: MultiExitNet, data: SliceSet, batch_size: int = 64) -> list[float]:
    model.eval()
    k = model.config.num_exits
    correct = torch.zeros(k, dtype=torch.long)
    for i in range(0, len(data), batch_size):
        out = model(data.images[i : i + batch_size])
        y = data.labels[i : i + batch_size]
        for j, z in enumerate(out.logits):
            correct[j] += (z.argmax(dim=1) == y).sum()
    return (correct.double() / max(1, len(data))).tolist()


def _require_phase(cfg: PhaseConfig, phase: str):
    if cfg.phase != phase:
        raise ValueError(f"expected a {phase!r} PhaseConfig, got {cfg.phase!r}")


def _snapshot(init: Checkpoint, cfg: PhaseConfig) -> dict:
    config = json.loads(json.dumps(init.config))
    config[cfg.phase] = cfg.to_dict()
    return config


# ---------------------------------------------------------------------------
# phases


def run_pretrain_phase(cfg: PhaseConfig, data: SliceSet, init: Checkpoint) -> Checkpoint:
    """SupCon on two augmented views per slice, using projected exit-4 embeddings."""
    _require_phase(cfg, "pretrain")
    _deterministic()
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model = init.build_model()
    opt = _optimizer(cfg, model.parameters())
    trail = list(init.metrics)
    # fail early on an infeasible sampler even when epochs == 0
    next(balanced_batches(data.labels, cfg.batch_size, torch.Generator().manual_seed(0)))

    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr_init, cfg.lr_min)
        _set_lr(opt, lr)
        model.train()
        losses = []
        for idx in balanced_batches(data.labels, cfg.batch_size, gen):
            x = data.images[idx]
            views = torch.cat([augment(x, gen), augment(x, gen)])
            labels = torch.cat([data.labels[idx], data.labels[idx]])
            loss = supcon_loss(model.embed(views), labels, cfg.temperature) / len(labels)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        row = {"phase": "pretrain", "epoch": epoch, "loss": float(np.mean(losses)), "lr": lr}
        log.info("pretrain epoch %d loss %.4f", epoch, row["loss"])
        trail.append(row)

    model.eval()
    return Checkpoint(
        params=_state("backbone", model),
        phase="pretrain",
        epoch=cfg.epochs,
        seed=cfg.seed,
        config=_snapshot(init, cfg),
        metrics=trail,
    )


def run_multi_exit_phase(cfg: PhaseConfig, data: SliceSet, init: Checkpoint, val: Optional[SliceSet] = None) -> Checkpoint:
    """Adam on the summed per-exit CE; stops once every exit reaches the accuracy target on ``val``."""
    _require_phase(cfg, "multi_exit")
    _deterministic()
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model = init.build_model()
    opt = _optimizer(cfg, model.backbone_parameters())
    trail = list(init.metrics)
    epochs_run = 0

    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr_init, cfg.lr_min)
        _set_lr(opt, lr)
        model.train()
        total, count = 0.0, 0
        for idx in _batches(len(data), cfg.batch_size, gen):
            if len(idx) < 2:  # batch norm needs more than one sample
                continue
            x = data.images[idx]
            flip = torch.rand(len(idx), generator=gen) < 0.5
            x = torch.where(flip[:, None, None, None], x.flip(-1), x)
            loss = multi_exit_ce_loss(model(x), data.labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        epochs_run = epoch + 1
        acc = exit_accuracy(model, val) if val is not None and len(val) else []
        row = {"phase": "multi_exit", "epoch": epoch, "loss": total / max(count, 1), "lr": lr, "exit_accuracy": acc}
        log.info("multi_exit epoch %d loss %.4f val acc %s", epoch, row["loss"], [round(a, 3) for a in acc])
        trail.append(row)
        if acc and epochs_run >= cfg.min_epochs and min(acc) >= cfg.accuracy_target:
            break

    model.eval()
    return Checkpoint(
        params=_state("backbone", model),
        phase="multi_exit",
        epoch=epochs_run,
        seed=cfg.seed,
        config=_snapshot(init, cfg),
        metrics=trail,
    )


@torch.no_grad()
def _precompute(model: MultiExitNet, data: SliceSet, batch_size: int = 64):
    """Exit CAMs (B x K x S x S) and per-exit native-resolution features."""
    cams, feats = [], []
    for i in range(0, len(data), batch_size):
        x = data.images[i : i + batch_size]
        cams.append(exit_cams(model, x).float())
        feats.append(model(x).features)
    return torch.cat(cams), [torch.cat(f) for f in zip(*feats)]


def run_aggregation_phase(cfg: PhaseConfig, data: SliceSet, classifier_ckpt: Checkpoint, attention: Optional[AggregationConfig] = None) -> Checkpoint:
    """Train the attention net (and pixel projector) on top of a trained multi-exit classifier.

    The C2AM arm uses only tumor-labelled slices, since fg/bg contrast is
    undefined without a foreground; the cross-entropy arm uses all slices.
    """
    _require_phase(cfg, "aggregation")
    if classifier_ckpt.phase not in ("multi_exit", "aggregation"):
        raise IncompatibleCheckpoint(f"aggregation needs a multi_exit checkpoint, got phase {classifier_ckpt.phase!r}")
    acfg = attention or classifier_ckpt.attention_config
    bcfg = classifier_ckpt.backbone_config
    if data.images.shape[-1] != bcfg.input_size:
        raise IncompatibleCheckpoint(f"data resolution {data.images.shape[-1]} != backbone input_size {bcfg.input_size}")
    _deterministic()
    model = classifier_ckpt.build_model()
    model.eval()
    # seed after building the backbone so the attention init depends on cfg.seed alone
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    for p in model.parameters():
        p.requires_grad_(not acfg.freeze_backbone)
    att = AttentionNet(bcfg.num_exits, acfg.attention_hidden)
    proj = _projector(bcfg, acfg)
    head = MapClassifier(bcfg.num_classes)
    trainable = list(att.parameters())
    if acfg.train_projector:
        trainable += list(proj.parameters())
    if acfg.loss == "cross_entropy":
        trainable += list(head.parameters())
    if not acfg.freeze_backbone:
        trainable += list(model.backbone_parameters())
    opt = _optimizer(cfg, trainable)

    if acfg.loss == "c2am":
        data = data.subset((data.labels == 1).nonzero().flatten())
    cams, feats = _precompute(model, data)
    size = data.images.shape[-2:]
    trail = list(classifier_ckpt.metrics)

    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr_init, cfg.lr_min)
        _set_lr(opt, lr)
        att.train()
        proj.train()
        losses = []
        for idx in _batches(len(data), cfg.batch_size, gen):
            if len(idx) < 2:
                continue
            x = data.images[idx]
            f = [t[idx] for t in feats] if acfg.freeze_backbone else model(x).features
            f = _select_features(x, f, acfg)
            w = att(x, cams[idx])
            M = fuse_batch(cams[idx], w)
            if acfg.loss == "c2am":
                emb = fg_bg_embed(M, proj(f, size), acfg.epsilon)
                loss = c2am_loss(emb, acfg.epsilon)
            else:
                loss = aggregation_ce_loss(M, data.labels[idx], head)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        row = {"phase": "aggregation", "epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan"), "lr": lr}
        log.info("aggregation epoch %d loss %.4f", epoch, row["loss"])
        trail.append(row)

    att.eval()
    proj.eval()
    config = _snapshot(classifier_ckpt, cfg)
    config["attention"] = acfg.to_dict()
    params = {**_state("backbone", model), **_state("attention", att), **_state("projector", proj)}
    if acfg.loss == "cross_entropy":
        params.update(_state("map_head", head))
    return Checkpoint(
        params=params,
        phase="aggregation",
        epoch=cfg.epochs,
        seed=cfg.seed,
        config=config,
        metrics=trail,
    )


def write_metrics_csv(ckpt: Checkpoint, path) -> None:
    """Append-style per-epoch log: epoch, phase, loss, per-exit accuracy, lr."""
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["epoch", "phase", "loss", "exit_accuracy", "lr"])
        for row in ckpt.metrics:
            if row["phase"] != ckpt.phase:
                continue
            acc = ";".join(f"{a:.4f}" for a in row.get("exit_accuracy", []))
            w.writerow([row["epoch"], row["phase"], f"{row['loss']:.6f}", acc, f"{row['lr']:.8g}"])
