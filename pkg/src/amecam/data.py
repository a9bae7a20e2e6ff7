"""Volume ingestion, axial slicing, case-level split manifests and phantoms.

Two on-disk volume formats are understood:

* NIfTI (``.nii`` / ``.nii.gz``), read through nibabel.  Arrays are stored
  x, y, z on disk and are transposed to D x H x W (z first).
* Raw little-endian float32 ``<case_id>.bin`` with a ``<case_id>.json``
  sidecar (``dims``, ``dtype``, ``byte_order``) and an optional uint8
  ``<case_id>.mask.bin`` of the same dimensions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import (
    BadDimensions,
    CorruptHeader,
    EmptyCaseList,
    MissingFile,
    MissingMask,
    NonFiniteVoxels,
    ShapeMismatch,
    SplitInfeasible,
)

SPLITS = ("train", "val", "test")


class Modality(str, Enum):
    T1 = "T1"
    T1CE = "T1CE"
    T2 = "T2"
    T2FLAIR = "T2FLAIR"
    SYNTH = "SYNTH"


@dataclass
class VolumeRecord:
    case_id: str
    modality: Modality
    voxels: np.ndarray  # D x H x W
    mask: Optional[np.ndarray] = None  # D x H x W, {0, 1}

    def __post_init__(self):
        self.modality = Modality(self.modality)
        if self.voxels.ndim != 3:
            raise BadDimensions(f"{self.case_id}: expected 3D voxels, got shape {self.voxels.shape}")
        if not np.all(np.isfinite(self.voxels)):
            raise NonFiniteVoxels(f"{self.case_id}: volume contains NaN/Inf voxels")
        if self.mask is not None:
            if self.mask.shape != self.voxels.shape:
                raise ShapeMismatch(
                    f"{self.case_id}: mask shape {self.mask.shape} != voxel shape {self.voxels.shape}"
                )
            self.mask = (self.mask > 0).astype(np.uint8)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)  # type: ignore[return-value]


@dataclass
class SliceSample:
    case_id: str
    z_index: int
    image: np.ndarray  # H x W, float64 in [0, 1]
    label: Optional[int]  # None when the volume carries no mask
    gt_mask: Optional[np.ndarray] = None
    modality: Modality = Modality.SYNTH
    # raw intensity range of the plane; image * (raw_max - raw_min) + raw_min recovers it
    raw_min: float = 0.0
    raw_max: float = 0.0

    def denormalize(self) -> np.ndarray:
        span = self.raw_max - self.raw_min
        out = self.image * span + self.raw_min
        if span > 0:
            # snap to a power-of-two grid far finer than float32 resolution at this range,
            # which removes the float64 residue (e.g. -1e-16 where 0 was stored)
            q = 2.0 ** (math.floor(math.log2(span)) - 40)
            out = np.round(out / q) * q
        return out


@dataclass
class ManifestEntry:
    case_id: str
    z_index: int
    split: str
    label: int


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    seed: int
    counts: dict[str, int] = field(default_factory=dict)
    data_dir: Optional[str] = None

    def __post_init__(self):
        if not self.counts:
            self.counts = self.tally()

    def tally(self) -> dict[str, int]:
        counts = {s: 0 for s in SPLITS}
        for e in self.entries:
            counts[e.split] += 1
        return counts

    def split_of(self, case_id: str) -> str:
        for e in self.entries:
            if e.case_id == case_id:
                return e.split
        raise KeyError(case_id)

    def cases(self, split: str) -> list[str]:
        seen: dict[str, None] = {}
        for e in self.entries:
            if e.split == split:
                seen.setdefault(e.case_id, None)
        return list(seen)

    def select(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def to_dict(self) -> dict:
        d = {
            "entries": [
                {"case_id": e.case_id, "z_index": e.z_index, "split": e.split, "label": e.label}
                for e in self.entries
            ],
            "seed": self.seed,
            "counts": dict(self.counts),
        }
        if self.data_dir is not None:
            d["data_dir"] = self.data_dir
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise MissingFile(str(path))
        raw = json.loads(path.read_text())
        entries = [ManifestEntry(**e) for e in raw["entries"]]
        data_dir = raw.get("data_dir")
        if data_dir is not None and not Path(data_dir).is_absolute():
            data_dir = str((path.parent / data_dir).resolve())
        return cls(entries=entries, seed=raw["seed"], counts=raw["counts"], data_dir=data_dir)


# ---------------------------------------------------------------------------
# loading


def _is_nifti(path: Path) -> bool:
    return path.name.endswith(".nii") or path.name.endswith(".nii.gz")


def _nifti_stem(path: Path) -> str:
    name = path.name
    return name[: -len(".nii.gz")] if name.endswith(".nii.gz") else name[: -len(".nii")]


def _read_nifti(path: Path) -> np.ndarray:
    import nibabel as nib

    try:
        img = nib.load(str(path))
        arr = np.asarray(img.dataobj, dtype=np.float32)
    except Exception as exc:  # nibabel raises a zoo of types for bad headers
        raise CorruptHeader(f"{path}: {exc}") from exc
    if arr.ndim == 4 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    if arr.ndim != 3:
        raise CorruptHeader(f"{path}: expected a 3D image, got shape {arr.shape}")
    # x, y, z -> z, y, x
    return np.ascontiguousarray(arr.transpose(2, 1, 0))


def _read_header(path: Path) -> dict:
    try:
        header = json.loads(path.read_text())
        dims = [int(v) for v in header["dims"]]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CorruptHeader(f"{path}: {exc}") from exc
    if len(dims) != 3 or min(dims) < 1:
        raise CorruptHeader(f"{path}: dims must be three positive ints, got {dims}")
    if header.get("dtype", "f32") != "f32" or header.get("byte_order", "little") != "little":
        raise CorruptHeader(f"{path}: only little-endian f32 volumes are supported")
    header["dims"] = dims
    return header


def _read_raw(path: Path, dims: Sequence[int], dtype: str) -> np.ndarray:
    data = np.fromfile(path, dtype=dtype)
    if data.size != math.prod(dims):
        raise ShapeMismatch(f"{path}: {data.size} values do not fill dims {tuple(dims)}")
    return data.reshape(dims)


def load_volume(path, mask_path=None, modality: Optional[str] = None) -> VolumeRecord:
    """Read one volume (and optionally its mask) from disk.

    For the raw format, ``path`` may name either the ``.bin`` payload or its
    ``.json`` header; a sibling ``<case_id>.mask.bin`` is picked up
    automatically when ``mask_path`` is not given.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))

    if _is_nifti(path):
        case_id = _nifti_stem(path)
        voxels = _read_nifti(path)
        mod = modality or Modality.T1
    else:
        bin_path = path.with_suffix(".bin")
        hdr_path = path.with_suffix(".json")
        if not hdr_path.exists():
            raise CorruptHeader(f"{path}: missing JSON sidecar {hdr_path.name}")
        if not bin_path.exists():
            raise MissingFile(str(bin_path))
        header = _read_header(hdr_path)
        case_id = header.get("case_id", bin_path.stem)
        mod = modality or header.get("modality", Modality.SYNTH)
        voxels = _read_raw(bin_path, header["dims"], "<f4")
        if mask_path is None:
            sibling = bin_path.with_name(bin_path.stem + ".mask.bin")
            if sibling.exists():
                mask_path = sibling

    mask = None
    if mask_path is not None:
        mask_path = Path(mask_path)
        if not mask_path.exists():
            raise MissingFile(str(mask_path))
        if _is_nifti(mask_path):
            mask = _read_nifti(mask_path)
        else:
            try:
                mask = _read_raw(mask_path, voxels.shape, "u1")
            except ShapeMismatch as exc:
                raise ShapeMismatch(f"{case_id}: mask does not match volume dims: {exc}") from exc
        if mask.shape != voxels.shape:
            raise ShapeMismatch(f"{case_id}: mask shape {mask.shape} != voxel shape {voxels.shape}")

    if not np.all(np.isfinite(voxels)):
        raise NonFiniteVoxels(f"{path}: volume contains NaN/Inf voxels")
    return VolumeRecord(case_id=case_id, modality=mod, voxels=voxels, mask=mask)


def save_volume(vol: VolumeRecord, out_dir) -> Path:
    """Write ``vol`` in the raw binary + JSON sidecar format; returns the header path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vol.voxels.astype("<f4").tofile(out_dir / f"{vol.case_id}.bin")
    header = {
        "case_id": vol.case_id,
        "dims": list(vol.shape),
        "dtype": "f32",
        "byte_order": "little",
        "modality": vol.modality.value,
    }
    hdr = out_dir / f"{vol.case_id}.json"
    hdr.write_text(json.dumps(header, indent=1))
    if vol.mask is not None:
        vol.mask.astype("u1").tofile(out_dir / f"{vol.case_id}.mask.bin")
    return hdr


def discover_volumes(data_dir) -> list[Path]:
    """Volume files in ``data_dir``: raw headers plus NIfTI images (masks excluded)."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise MissingFile(str(data_dir))
    found = []
    for p in sorted(data_dir.iterdir()):
        if p.suffix == ".json" and not p.name.startswith("manifest"):
            found.append(p)
        elif _is_nifti(p) and not _nifti_stem(p).endswith(("_seg", "_mask")):
            found.append(p)
    return found


def load_directory(data_dir) -> list[VolumeRecord]:
    vols = []
    for p in discover_volumes(data_dir):
        mask_path = None
        if _is_nifti(p):
            for suffix in ("_seg", "_mask"):
                for ext in (".nii.gz", ".nii"):
                    cand = p.with_name(_nifti_stem(p) + suffix + ext)
                    if cand.exists():
                        mask_path = cand
        vols.append(load_volume(p, mask_path))
    return vols


# ---------------------------------------------------------------------------
# slicing


def derive_slice_label(mask_plane: Optional[np.ndarray]) -> int:
    if mask_plane is None:
        raise MissingMask("cannot derive an image-level label without a mask")
    return int(np.any(mask_plane != 0))


def slice_volume(vol: VolumeRecord) -> list[SliceSample]:
    samples = []
    for z in range(vol.voxels.shape[0]):
        plane = vol.voxels[z].astype(np.float64)
        lo, hi = float(plane.min()), float(plane.max())
        if hi > lo:
            image = (plane - lo) / (hi - lo)
        else:
            image = np.zeros_like(plane)
        gt = None if vol.mask is None else vol.mask[z].copy()
        samples.append(
            SliceSample(
                case_id=vol.case_id,
                z_index=z,
                image=image,
                label=derive_slice_label(gt) if gt is not None else None,
                gt_mask=gt,
                modality=vol.modality,
                raw_min=lo,
                raw_max=hi,
            )
        )
    return samples


# ---------------------------------------------------------------------------
# synthetic phantoms


def _smooth_texture(rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray, n_waves: int = 4) -> np.ndarray:
    """Sum of a few low-frequency plane waves, scaled to roughly [-1, 1]."""
    out = np.zeros_like(yy)
    for _ in range(n_waves):
        fy, fx = rng.uniform(-3.0, 3.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
    return out / n_waves


def _phantom_case(rng: np.random.Generator, case_id: str, d: int, h: int, w: int, tumor_fraction: float) -> VolumeRecord:
    zz, yy, xx = np.meshgrid(
        np.arange(d, dtype=np.float64),
        np.arange(h, dtype=np.float64),
        np.arange(w, dtype=np.float64),
        indexing="ij",
    )

    # brain: an ellipse in-plane whose size tapers towards the first/last slice
    cy = (h - 1) / 2 + rng.uniform(-0.04, 0.04) * h
    cx = (w - 1) / 2 + rng.uniform(-0.04, 0.04) * w
    ry = rng.uniform(0.36, 0.42) * h
    rx = rng.uniform(0.36, 0.42) * w
    zmid = (d - 1) / 2
    taper = np.sqrt(1.0 - 0.6 * ((np.arange(d) - zmid) / (d / 2)) ** 2)
    t3 = taper[:, None, None]
    brain = ((yy - cy) / (ry * t3)) ** 2 + ((xx - cx) / (rx * t3)) ** 2 <= 1.0

    # bright scalp rim, so that after per-slice min-max the brain never becomes the maximum
    rim_w = max(1.5, 0.04 * min(h, w))
    scalp = ((yy - cy) / (ry * t3 + rim_w)) ** 2 + ((xx - cx) / (rx * t3 + rim_w)) ** 2 <= 1.0

    brain_level = rng.uniform(0.40, 0.50)
    texture = _smooth_texture(rng, yy / h, xx / w)
    vol = np.full((d, h, w), 0.05)
    vol = np.where(scalp, rng.uniform(0.95, 1.0), vol)
    vol = np.where(brain, brain_level + 0.08 * texture, vol)

    mask = np.zeros((d, h, w), dtype=np.uint8)
    if rng.random() < tumor_fraction:
        tz = rng.uniform(0.3, 0.7) * (d - 1)
        rz = rng.uniform(0.30, 0.45) * d
        rty = rng.uniform(0.12, 0.22) * min(h, w)
        rtx = rng.uniform(0.12, 0.22) * min(h, w)
        # the ellipsoid is clipped where its cross-section would shrink below 2/3 of the equator
        zlo = max(0, math.ceil(tz - 0.75 * rz))
        zhi = min(d - 1, math.floor(tz + 0.75 * rz))
        if zhi < zlo:
            zlo = zhi = int(round(np.clip(tz, 0, d - 1)))
        s_min = float(taper[zlo : zhi + 1].min())
        headroom = min(ry, rx) * s_min - max(rty, rtx) - 2.0
        if headroom < 0:
            shrink = (min(ry, rx) * s_min - 2.0) / max(rty, rtx) * 0.9
            rty, rtx = rty * shrink, rtx * shrink
            headroom = min(ry, rx) * s_min - max(rty, rtx) - 2.0
        off = rng.uniform(0.0, 1.0) * headroom
        ang = rng.uniform(0.0, 2 * np.pi)
        ty, tx = cy + off * np.sin(ang), cx + off * np.cos(ang)
        tumor = ((zz - tz) / rz) ** 2 + ((yy - ty) / rty) ** 2 + ((xx - tx) / rtx) ** 2 <= 1.0
        zsel = (zz >= zlo) & (zz <= zhi)
        # force at least the centre slice to carry tumor when the ellipsoid misses the grid
        tumor &= zsel
        if not tumor.any():
            zc = int(round(np.clip(tz, 0, d - 1)))
            tumor[zc] = ((yy[zc] - ty) / rty) ** 2 + ((xx[zc] - tx) / rtx) ** 2 <= 1.0
        tumor &= brain
        mask = tumor.astype(np.uint8)
        vol = np.where(tumor, rng.uniform(0.80, 0.90) + 0.05 * texture, vol)

    vol = vol + rng.normal(0.0, 0.04, size=vol.shape)
    return VolumeRecord(case_id=case_id, modality=Modality.SYNTH, voxels=vol.astype(np.float32), mask=mask)


def generate_synthetic(
    n_cases: int, d: int, h: int, w: int, tumor_fraction: float = 0.7, seed: int = 0
) -> list[VolumeRecord]:
    """Noisy elliptical "brains" on a dark background, some carrying a bright tumor.

    Output is a pure function of the arguments.
    """
    if n_cases < 1:
        raise BadDimensions(f"n_cases must be >= 1, got {n_cases}")
    if min(d, h, w) < 8:
        raise BadDimensions(f"d, h, w must all be >= 8, got {(d, h, w)}")
    if not 0.0 <= tumor_fraction <= 1.0:
        raise BadDimensions(f"tumor_fraction must lie in [0, 1], got {tumor_fraction}")
    rng = np.random.default_rng(seed)
    return [_phantom_case(rng, f"synth_{i:04d}", d, h, w, tumor_fraction) for i in range(n_cases)]


# ---------------------------------------------------------------------------
# manifests


def _split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    raw = [n * r for r in ratios]
    sizes = [math.floor(v) for v in raw]
    # largest remainder, ties broken towards the earlier split
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    for i in range(len(sizes)):
        if sizes[i] == 0:
            donor = max(range(len(sizes)), key=lambda j: sizes[j])
            sizes[donor] -= 1
            sizes[i] += 1
    return sizes


def build_manifest(
    cases: Iterable[VolumeRecord], ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0
) -> DatasetManifest:
    """Shuffle cases with ``seed`` and carve contiguous train/val/test blocks."""
    cases = list(cases)
    if not cases:
        raise EmptyCaseList("no cases to split")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitInfeasible(f"ratios must be three positive numbers summing to 1, got {ratios}")
    if len(cases) < len(ratios):
        raise SplitInfeasible(f"{len(cases)} case(s) cannot populate {len(ratios)} splits")

    by_id = {c.case_id: c for c in cases}
    if len(by_id) != len(cases):
        raise SplitInfeasible("duplicate case ids")
    ids = sorted(by_id)
    perm = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    sizes = _split_sizes(len(ids), ratios)

    split_of: dict[str, str] = {}
    start = 0
    for split, size in zip(SPLITS, sizes):
        for cid in shuffled[start : start + size]:
            split_of[cid] = split
        start += size

    entries = []
    for cid in ids:
        vol = by_id[cid]
        for z in range(vol.voxels.shape[0]):
            plane = None if vol.mask is None else vol.mask[z]
            entries.append(ManifestEntry(cid, z, split_of[cid], derive_slice_label(plane)))
    return DatasetManifest(entries=entries, seed=seed)
