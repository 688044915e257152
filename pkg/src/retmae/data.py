"""Synthetic paired phantoms, dataset I/O, stratified splitting and paired augmentation."""
from __future__ import annotations

import csv
import logging
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
from PIL import Image
from scipy import ndimage
from scipy.interpolate import CubicSpline

from .core import DataError, Modality, Sample

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MANIFEST_COLUMNS = ("sample_id", "patient_id", "split", "label", "oct_path", "slo_path", "layers_path",
                    "mask_path", "spacing_x", "spacing_y", "slice_mm")


class MissingFileError(DataError):
    pass


class CorruptImageError(DataError):
    pass


class ClassIndexError(DataError):
    pass


class ManifestError(DataError):
    pass


def minmax(plane: np.ndarray) -> np.ndarray:
    """Scale onto [0, 1]; constant planes map to zeros."""
    plane = np.asarray(plane, dtype=np.float32)
    lo, hi = float(plane.min()), float(plane.max())
    if hi <= lo:
        return np.zeros_like(plane, dtype=np.float32)
    return ((plane - lo) / (hi - lo)).astype(np.float32)


# ---------------------------------------------------------------------------
# phantoms


@dataclass(frozen=True)
class PhantomConfig:
    """Layered B-scan phantoms with optional lesions.

    Classes in the layer map: 0 background, 1..C-2 retinal bands, C-1 lesion.
    """

    image_size: int = 64
    num_layer_classes: int = 6
    control_points: int = 5
    boundary_wobble: float = 0.02  # fraction of image height
    retina_top: tuple[float, float] = (0.06, 0.14)  # fraction of image height
    retina_thickness: tuple[float, float] = (0.7, 0.8)
    speckle: float = 0.05
    lesion_prob: float = 0.5
    lesion_radius: tuple[float, float] = (0.08, 0.16)  # fraction of image size
    class_rule: str = "lesion"  # label 1 iff the sample carries a lesion
    spacing: tuple[float, float, float] = (0.011, 0.0039, 0.12)
    seed: int = 0

    @classmethod
    def plain(cls, **overrides) -> "PhantomConfig":
        """Lesion-free phantoms with gently curved layers (the overfit smoke-test data)."""
        kw = dict(lesion_prob=0.0, control_points=3, boundary_wobble=0.01)
        kw.update(overrides)
        return cls(**kw)

    @property
    def num_bands(self) -> int:
        return self.num_layer_classes - 2

    def __post_init__(self) -> None:
        if self.num_layer_classes < 3:
            raise DataError("phantoms need at least 3 layer classes (background, one band, lesion)")
        if self.class_rule not in ("lesion", "none"):
            raise DataError(f"unknown class rule {self.class_rule!r}")


def _band_levels(n: int) -> np.ndarray:
    # alternate bright and dark bands so neighbouring layers contrast
    bright = np.linspace(0.95, 0.7, (n + 1) // 2)
    dark = np.linspace(0.45, 0.3, n // 2)
    out = np.empty(n)
    out[0::2], out[1::2] = bright, dark
    return out


def _boundaries(cfg: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    """(num_bands + 1, W) strictly increasing boundary rows."""
    h = w = cfg.image_size
    xs = np.linspace(0, w - 1, cfg.control_points)
    cols = np.arange(w)
    for attempt in range(100):
        top = rng.uniform(*cfg.retina_top) * h
        thickness = rng.uniform(*cfg.retina_thickness) * h
        props = rng.dirichlet(np.full(cfg.num_bands, 8.0))
        base = top + thickness * np.concatenate([[0.0], np.cumsum(props)])
        tilt = CubicSpline(xs, rng.normal(0, cfg.boundary_wobble * h, cfg.control_points))(cols)
        curves = []
        for b in base:
            own = CubicSpline(xs, rng.normal(0, 0.25 * cfg.boundary_wobble * h, cfg.control_points))(cols)
            curves.append(b + tilt + own)
        curves = np.clip(np.array(curves), 0, h)
        if np.all(np.diff(curves, axis=0) >= 1.0):
            return curves
        log.info("phantom bands thinner than one pixel; regenerating (attempt %d)", attempt + 1)
    raise DataError("could not generate ordered layer boundaries")


def _rasterize_layers(curves: np.ndarray, h: int) -> np.ndarray:
    rows = np.arange(h)[:, None] + 0.5
    counts = np.zeros((h, curves.shape[1]), dtype=np.int64)
    for c in curves:
        counts += rows >= c[None, :]
    # counts == 0 above the retina, == num_bands + 1 below it
    counts[counts == len(curves)] = 0
    return counts


def _ellipse(h: int, w: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy + 0.5 - cy) / ry) ** 2 + ((xx + 0.5 - cx) / rx) ** 2 <= 1.0


def synth_sample(cfg: PhantomConfig, rng: np.random.Generator, sample_id: str, patient_id: str,
                 diseased: bool) -> Sample:
    h = w = cfg.image_size
    curves = _boundaries(cfg, rng)
    layers = _rasterize_layers(curves, h)
    levels = np.concatenate([[0.08], _band_levels(cfg.num_bands)])
    oct_clean = levels[layers]
    lesion = np.zeros((h, w), dtype=bool)
    lesion_cols = []
    if diseased:
        for _ in range(int(rng.integers(1, 3))):
            cx = rng.uniform(0.2, 0.8) * w
            col = int(np.clip(cx, 0, w - 1))
            top, bottom = curves[0][col], curves[-1][col]
            cy = rng.uniform(top + 0.3 * (bottom - top), top + 0.7 * (bottom - top))
            r = rng.uniform(*cfg.lesion_radius) * h
            lesion |= _ellipse(h, w, cy, cx, r * 0.7, r * 1.2) & (layers > 0)
            lesion_cols.append((cx, r))
        layers = np.where(lesion, cfg.num_layer_classes - 1, layers)
        oct_clean = np.where(lesion, 0.02, oct_clean)
    speck = 1.0 + cfg.speckle * rng.standard_normal((h, w))
    oct_img = minmax(np.clip(oct_clean * speck, 0, 1))

    # en-face plane: smooth background, dark vessel-free disc, lesion blobs on the scan line
    bg = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=h / 10)
    bg = 0.55 + 0.15 * bg / (np.abs(bg).max() + 1e-12)
    slo = bg.copy()
    slo[h // 2 - 1: h // 2 + 1, :] += 0.1  # scan-line marker
    for cx, r in lesion_cols:
        slo = np.where(_ellipse(h, w, h / 2, cx, r, r), 0.1, slo)
    slo = minmax(np.clip(slo * (1.0 + cfg.speckle * rng.standard_normal((h, w))), 0, 1))

    label = None
    if cfg.class_rule == "lesion":
        label = int(lesion.any())
    return Sample(sample_id=sample_id, patient_id=patient_id, oct=oct_img, slo=slo,
                  layers=layers.astype(np.int64), label=label, mask=lesion.astype(np.int64),
                  spacing=tuple(cfg.spacing))


def synth_generate(cfg: PhantomConfig, n_patients: int, samples_per_patient: int,
                   ratios: Sequence[float] = (0.6, 0.2, 0.2)) -> tuple[list[Sample], list["ManifestRow"]]:
    """Generate paired phantoms and a patient- and label-stratified manifest."""
    root = np.random.SeedSequence(cfg.seed)
    samples: list[Sample] = []
    for pi, pseq in enumerate(root.spawn(n_patients)):
        rng = np.random.default_rng(pseq)
        diseased = bool(rng.random() < cfg.lesion_prob)
        pid = f"P{pi:04d}"
        for si in range(samples_per_patient):
            samples.append(synth_sample(cfg, rng, f"{pid}_S{si:03d}", pid, diseased))
    rows = [ManifestRow.for_sample(s) for s in samples]
    assignment = split_stratified(rows, ratios, cfg.seed)
    for r in rows:
        r.split = assignment[r.patient_id]
    return samples, rows


# ---------------------------------------------------------------------------
# manifest and on-disk layout


@dataclass
class ManifestRow:
    sample_id: str
    patient_id: str
    split: str = "train"
    label: Optional[int] = None
    oct_path: str = ""
    slo_path: str = ""
    layers_path: str = ""
    mask_path: str = ""
    spacing_x: float = 1.0
    spacing_y: float = 1.0
    slice_mm: float = 1.0

    @classmethod
    def for_sample(cls, s: Sample) -> "ManifestRow":
        sid = s.sample_id
        return cls(
            sample_id=sid, patient_id=s.patient_id, label=s.label,
            oct_path=f"images/{sid}_oct.png",
            slo_path=f"images/{sid}_slo.png" if s.slo is not None else "",
            layers_path=f"masks/{sid}_layers.png" if s.layers is not None else "",
            mask_path=f"masks/{sid}_mask.png" if s.mask is not None else "",
            spacing_x=s.spacing[0], spacing_y=s.spacing[1], slice_mm=s.spacing[2],
        )

    def to_csv(self) -> list[str]:
        return [self.sample_id, self.patient_id, self.split, "" if self.label is None else str(self.label),
                self.oct_path, self.slo_path, self.layers_path, self.mask_path,
                repr(float(self.spacing_x)), repr(float(self.spacing_y)), repr(float(self.slice_mm))]


def write_manifest(path: Path, rows: Iterable[ManifestRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in rows:
            writer.writerow(r.to_csv())


def read_manifest(path: Path) -> list[ManifestRow]:
    if not path.exists():
        raise MissingFileError(f"manifest not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_COLUMNS:
            raise ManifestError(f"manifest header must be {','.join(MANIFEST_COLUMNS)}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(MANIFEST_COLUMNS):
                raise ManifestError(f"manifest line {lineno}: expected {len(MANIFEST_COLUMNS)} fields")
            try:
                rows.append(ManifestRow(
                    sample_id=rec[0], patient_id=rec[1], split=rec[2],
                    label=int(rec[3]) if rec[3] != "" else None,
                    oct_path=rec[4], slo_path=rec[5], layers_path=rec[6], mask_path=rec[7],
                    spacing_x=float(rec[8]), spacing_y=float(rec[9]), slice_mm=float(rec[10]),
                ))
            except ValueError as exc:
                raise ManifestError(f"manifest line {lineno}: {exc}") from exc
    ids = [r.sample_id for r in rows]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise ManifestError(f"duplicate sample_id in manifest: {dup}")
    bad = [r.split for r in rows if r.split not in SPLITS]
    if bad:
        raise ManifestError(f"unknown split {bad[0]!r}")
    spans = defaultdict(set)
    for r in rows:
        spans[r.patient_id].add(r.split)
    crossing = sorted(p for p, s in spans.items() if len(s) > 1)
    if crossing:
        raise ManifestError(f"patients span several splits: {crossing}")
    return rows


def save_intensity(path: str | Path, plane: np.ndarray) -> None:
    path = Path(path)
    q = np.round(np.clip(plane, 0, 1) * 65535).astype(np.uint16)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q).save(path)


_PALETTE = [c for i in range(256) for c in ((i * 67) % 256, (i * 139) % 256, (i * 211) % 256)]


def save_indexed(path: str | Path, labels: np.ndarray) -> None:
    path = Path(path)
    if labels.min() < 0 or labels.max() > 255:
        raise DataError(f"{path.name}: label values must fit in 8 bits")
    img = Image.fromarray(labels.astype(np.uint8))
    img.putpalette(_PALETTE)  # turns the L image into P without touching the indices
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)


def _open(path: Path) -> Image.Image:
    if not path.exists():
        raise MissingFileError(f"missing file: {path}")
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:  # PIL raises a zoo of exception types for bad files
        raise CorruptImageError(f"corrupt image {path}: {exc}") from exc
    return img


def load_intensity(path: Path) -> np.ndarray:
    img = _open(path)
    if img.mode in ("I;16", "I;16B", "I;16L", "I", "L"):
        arr = np.asarray(img).astype(np.float64)
    else:
        arr = np.asarray(img.convert("L")).astype(np.float64)
    return minmax(arr)


def load_indexed(path: Path, num_classes: Optional[int] = None) -> np.ndarray:
    img = _open(path)
    if img.mode not in ("P", "L"):
        raise CorruptImageError(f"{path}: expected an indexed raster, got mode {img.mode}")
    arr = np.asarray(img).astype(np.int64)
    if num_classes is not None and arr.size and arr.max() >= num_classes:
        raise ClassIndexError(f"{path}: class index {int(arr.max())} >= {num_classes}")
    return arr


def write_dataset(root: str | Path, samples: Sequence[Sample], rows: Sequence[ManifestRow]) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    by_id = {s.sample_id: s for s in samples}
    for r in rows:
        s = by_id[r.sample_id]
        save_intensity(root / r.oct_path, s.oct)
        if r.slo_path:
            save_intensity(root / r.slo_path, s.slo)
        if r.layers_path:
            save_indexed(root / r.layers_path, s.layers)
        if r.mask_path:
            save_indexed(root / r.mask_path, s.mask)
    write_manifest(root / "manifest.csv", rows)
    return root


def load_dataset(root: str | Path, num_layer_classes: Optional[int] = None,
                 num_mask_classes: Optional[int] = None) -> tuple[list[Sample], list[ManifestRow]]:
    root = Path(root)
    rows = read_manifest(root / "manifest.csv")
    samples = []
    for r in rows:
        samples.append(Sample(
            sample_id=r.sample_id, patient_id=r.patient_id,
            oct=load_intensity(root / r.oct_path),
            slo=load_intensity(root / r.slo_path) if r.slo_path else None,
            layers=load_indexed(root / r.layers_path, num_layer_classes) if r.layers_path else None,
            mask=load_indexed(root / r.mask_path, num_mask_classes) if r.mask_path else None,
            label=r.label, spacing=(r.spacing_x, r.spacing_y, r.slice_mm),
        ))
    return samples, rows


def select_split(samples: Sequence[Sample], rows: Sequence[ManifestRow], split: str) -> list[Sample]:
    keep = {r.sample_id for r in rows if r.split == split}
    return [s for s in samples if s.sample_id in keep]


# ---------------------------------------------------------------------------
# splitting


def split_stratified(rows: Sequence[ManifestRow], ratios: Sequence[float] = (0.6, 0.2, 0.2),
                     seed: int = 0) -> dict[str, str]:
    """Assign whole patients to train/val/test, balancing each label against ``ratios``.

    Returns patient_id -> split.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if len(ratios) != len(SPLITS) or abs(ratios.sum() - 1.0) > 1e-9 or (ratios < 0).any():
        raise DataError(f"ratios must be three nonnegative numbers summing to 1, got {list(ratios)}")
    patient_label: dict[str, object] = {}
    for r in rows:
        # a patient is labelled by its largest sample label (any diseased scan marks the patient)
        prev = patient_label.get(r.patient_id)
        lab = -1 if r.label is None else r.label
        patient_label[r.patient_id] = lab if prev is None else max(prev, lab)
    patients = sorted(patient_label)
    if len(patients) == 1:
        return {patients[0]: "train"}
    rng = np.random.default_rng(seed)
    groups: dict[object, list[str]] = defaultdict(list)
    for p in patients:
        groups[patient_label[p]].append(p)
    need = int((ratios > 0).sum())
    pooled: list[str] = []
    for lab in sorted(groups):
        if len(groups[lab]) < need:
            warnings.warn(f"label {lab} has {len(groups[lab])} patients (< {need} splits); pooled", stacklevel=2)
            pooled.extend(groups.pop(lab))
    if pooled:
        groups["__pooled__"] = pooled

    out: dict[str, str] = {}
    for key in sorted(groups, key=str):
        members = list(groups[key])
        rng.shuffle(members)
        counts = np.zeros(len(SPLITS))
        for i, p in enumerate(members):
            deficit = ratios * (i + 1) - counts
            k = int(np.argmax(deficit))
            counts[k] += 1
            out[p] = SPLITS[k]
    return out


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentPolicy:
    flip_prob: float = 0.5
    rotation_deg: float = 10.0
    translate: float = 0.05
    scale: tuple[float, float] = (0.9, 1.1)
    intensity_shift: float = 0.1

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(flip_prob=0.0, rotation_deg=0.0, translate=0.0, scale=(1.0, 1.0), intensity_shift=0.0)

    @classmethod
    def flip_only(cls) -> "AugmentPolicy":
        return cls(flip_prob=0.5, rotation_deg=0.0, translate=0.0, scale=(1.0, 1.0), intensity_shift=0.0)

    def __post_init__(self) -> None:
        if not 0 <= self.flip_prob <= 1:
            raise DataError("flip_prob must lie in [0, 1]")
        if self.rotation_deg < 0 or self.translate < 0 or self.intensity_shift < 0:
            raise DataError("augmentation magnitudes must be nonnegative")
        if not 0 < self.scale[0] <= self.scale[1]:
            raise DataError("scale range must be positive and ordered")


@dataclass(frozen=True)
class Transform:
    flip: bool = False
    angle_deg: float = 0.0
    shift_y: float = 0.0  # pixels
    shift_x: float = 0.0
    scale: float = 1.0
    intensity: float = 0.0

    @property
    def is_affine_identity(self) -> bool:
        return self.angle_deg == 0 and self.shift_y == 0 and self.shift_x == 0 and self.scale == 1

    def apply_geometric(self, plane: np.ndarray, categorical: bool) -> np.ndarray:
        out = plane[:, ::-1] if self.flip else plane
        if self.is_affine_identity:
            return np.ascontiguousarray(out)
        h, w = out.shape
        t = math.radians(self.angle_deg)
        rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]]) / self.scale
        center = np.array([(h - 1) / 2, (w - 1) / 2])
        offset = center - rot @ (center + np.array([self.shift_y, self.shift_x]))
        order = 0 if categorical else 1
        warped = ndimage.affine_transform(out.astype(np.float64 if not categorical else out.dtype), rot,
                                          offset=offset, order=order, mode="nearest")
        return warped.astype(plane.dtype)

    def apply(self, sample: Sample) -> Sample:
        def intensity(p):
            if p is None:
                return None
            return np.clip(self.apply_geometric(p, False) + self.intensity, 0, 1).astype(np.float32)

        def labels(p):
            return None if p is None else self.apply_geometric(p, True)

        return sample.replace(oct=intensity(sample.oct), slo=intensity(sample.slo),
                              layers=labels(sample.layers), mask=labels(sample.mask))


def draw_transform(rng: np.random.Generator, policy: AugmentPolicy, shape: tuple[int, int]) -> Transform:
    h, w = shape
    # always consume the same number of draws so streams stay aligned across policies
    u = rng.random(6)
    return Transform(
        flip=bool(u[0] < policy.flip_prob),
        angle_deg=float((2 * u[1] - 1) * policy.rotation_deg),
        shift_y=float((2 * u[2] - 1) * policy.translate * h),
        shift_x=float((2 * u[3] - 1) * policy.translate * w),
        scale=float(policy.scale[0] + u[4] * (policy.scale[1] - policy.scale[0])),
        intensity=float((2 * u[5] - 1) * policy.intensity_shift),
    )


def augment(sample: Sample, rng: np.random.Generator, policy: AugmentPolicy) -> Sample:
    """One geometric transform shared by every plane, plus an intensity shift."""
    return draw_transform(rng, policy, sample.oct.shape).apply(sample)


def random_crop(sample: Sample, rng: np.random.Generator, size: int) -> Sample:
    h, w = sample.oct.shape
    size = min(size, h, w)
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))

    def cut(p):
        return None if p is None else np.ascontiguousarray(p[y: y + size, x: x + size])

    return sample.replace(oct=cut(sample.oct), slo=cut(sample.slo), layers=cut(sample.layers), mask=cut(sample.mask))


# ---------------------------------------------------------------------------
# batching


def to_planes(samples: Sequence[Sample], modalities: Sequence[Modality],
              dtype: torch.dtype = torch.float32) -> dict[Modality, torch.Tensor]:
    out = {}
    for m in modalities:
        planes = [s.plane(m) for s in samples]
        if any(p is None for p in planes):
            missing = next(s.sample_id for s, p in zip(samples, planes) if p is None)
            raise DataError(f"sample {missing} lacks modality {Modality(m).value}")
        stacked = np.stack(planes)
        out[m] = torch.from_numpy(stacked).long() if Modality(m).categorical else torch.from_numpy(stacked).to(dtype)
    return out


def synth_blobs(n: int, image_size: int = 64, seed: int = 0, max_blobs: int = 3,
                radius: tuple[float, float] = (0.1, 0.2), contrast: float = 0.5,
                noise: float = 0.05) -> list[Sample]:
    """OCT-only samples with bright elliptical blobs and a binary blob mask."""
    root = np.random.SeedSequence([seed, 0xB10B])
    out = []
    h = w = image_size
    for i, seq in enumerate(root.spawn(n)):
        rng = np.random.default_rng(seq)
        bg = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=h / 8)
        img = 0.3 + 0.1 * bg / (np.abs(bg).max() + 1e-12)
        mask = np.zeros((h, w), dtype=bool)
        for _ in range(int(rng.integers(1, max_blobs + 1))):
            r = rng.uniform(*radius) * h
            cy, cx = rng.uniform(r, h - r), rng.uniform(r, w - r)
            mask |= _ellipse(h, w, cy, cx, r, r * rng.uniform(0.7, 1.4))
        img = img + contrast * mask + noise * rng.standard_normal((h, w))
        out.append(Sample(sample_id=f"B{i:05d}", patient_id=f"B{i:05d}", oct=minmax(np.clip(img, 0, 1)),
                          mask=mask.astype(np.int64)))
    return out
