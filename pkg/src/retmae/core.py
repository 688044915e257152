"""Shared domain types, patch algebra, configuration and checkpoint I/O."""
from __future__ import annotations

import dataclasses
import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np


class RetmaeError(Exception):
    """Base class; `code` is the CLI exit status for this failure family."""

    code = 1
    module = "core"


class ConfigError(RetmaeError, ValueError):
    code = 2
    module = "config"


class DataError(RetmaeError, ValueError):
    code = 3
    module = "data"


class ShapeError(DataError):
    module = "shape"


class CapacityError(RetmaeError, ValueError):
    code = 2
    module = "masking"


class NumericError(RetmaeError, ArithmeticError):
    code = 4
    module = "numeric"


class UndefinedMetricError(RetmaeError, ValueError):
    code = 3
    module = "metrics"


class Modality(str, enum.Enum):
    OCT = "OCT"
    SLO = "SLO"
    LAYERS = "LAYERS"

    @property
    def categorical(self) -> bool:
        return self is Modality.LAYERS


ALL_MODALITIES = (Modality.OCT, Modality.SLO, Modality.LAYERS)


def as_modalities(names: Sequence[str | Modality]) -> tuple[Modality, ...]:
    try:
        mods = tuple(Modality(str(getattr(n, "value", n)).upper()) for n in names)
    except ValueError as exc:
        raise ConfigError(f"unknown modality in {list(names)}") from exc
    if len(set(mods)) != len(mods) or not mods:
        raise ConfigError(f"modalities must be a nonempty set, got {list(names)}")
    # canonical order keeps token layout independent of how the user listed them
    return tuple(m for m in ALL_MODALITIES if m in mods)


@dataclass
class Sample:
    """One paired record. Planes are float32 in [0, 1]; label maps are int64."""

    sample_id: str
    patient_id: str
    oct: np.ndarray
    slo: Optional[np.ndarray] = None
    layers: Optional[np.ndarray] = None
    label: Optional[int] = None
    mask: Optional[np.ndarray] = None
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        shape = self.oct.shape
        for name in ("slo", "layers", "mask"):
            plane = getattr(self, name)
            if plane is not None and plane.shape != shape:
                raise ShapeError(
                    f"sample {self.sample_id}: {name} shape {plane.shape} != oct shape {shape}"
                )

    def plane(self, modality: Modality) -> Optional[np.ndarray]:
        return {Modality.OCT: self.oct, Modality.SLO: self.slo, Modality.LAYERS: self.layers}[
            Modality(modality)
        ]

    def has(self, modality: Modality) -> bool:
        return self.plane(modality) is not None

    def replace(self, **changes: Any) -> "Sample":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 2
    width: int = 64
    heads: int = 4
    patch: int = 8
    image_size: int = 64
    decoder_width: int = 64
    decoder_depth: int = 2
    decoder_heads: int = 4
    num_layer_classes: int = 6
    mlp_ratio: float = 4.0
    seg_head_width: int = 128
    # side length of the sub-grid each token is pixel-shuffled into; None means patch // 4
    seg_cells: Optional[int] = None
    convnext_depth: int = 4
    layer_embed_dim: int = 1
    modalities: tuple[str, ...] = ("OCT", "SLO", "LAYERS")
    variant: str = "custom"

    def __post_init__(self) -> None:
        object.__setattr__(self, "modalities", tuple(m.value for m in as_modalities(self.modalities)))
        self.validate()

    # presets -----------------------------------------------------------
    @classmethod
    def base(cls, **overrides: Any) -> "ModelConfig":
        kw = dict(depth=12, width=768, heads=12, patch=32, image_size=512, decoder_width=256,
                  decoder_heads=8, num_layer_classes=11, seg_head_width=6144, seg_cells=4,
                  variant="Base")
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def large(cls, **overrides: Any) -> "ModelConfig":
        kw = dict(depth=24, width=1024, heads=16, patch=32, image_size=512, decoder_width=256,
                  decoder_heads=8, num_layer_classes=11, seg_head_width=6144, seg_cells=4,
                  variant="Large")
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def tiny(cls, **overrides: Any) -> "ModelConfig":
        kw = dict(variant="Tiny")
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def preset(cls, name: str, **overrides: Any) -> "ModelConfig":
        table = {"base": cls.base, "large": cls.large, "tiny": cls.tiny, "custom": cls}
        try:
            return table[name.lower()](**overrides)
        except KeyError:
            raise ConfigError(f"unknown variant {name!r}") from None

    # derived -----------------------------------------------------------
    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def mlp_hidden(self) -> int:
        return int(self.width * self.mlp_ratio)

    @property
    def shuffle(self) -> int:
        return self.seg_cells if self.seg_cells is not None else self.patch // 4

    @property
    def seg_channels(self) -> int:
        return self.seg_head_width // (self.shuffle ** 2)

    @property
    def active(self) -> tuple[Modality, ...]:
        return as_modalities(self.modalities)

    def in_channels(self, modality: Modality) -> int:
        return self.layer_embed_dim if Modality(modality).categorical else 1

    def out_channels(self, modality: Modality) -> int:
        return self.num_layer_classes if Modality(modality).categorical else 1

    def validate(self) -> None:
        positive = ("depth", "width", "heads", "patch", "image_size", "decoder_width",
                    "decoder_depth", "decoder_heads", "num_layer_classes", "seg_head_width",
                    "convnext_depth", "layer_embed_dim")
        for name in positive:
            value = getattr(self, name)
            # depth 0 is a legal identity encoder
            if value < 0 or (value == 0 and name not in ("depth", "decoder_depth", "convnext_depth")):
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.mlp_ratio <= 0:
            raise ConfigError(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.decoder_width % self.decoder_heads:
            raise ConfigError(
                f"decoder_width {self.decoder_width} not divisible by decoder_heads {self.decoder_heads}"
            )
        if self.image_size % self.patch:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch {self.patch}")
        if self.num_layer_classes < 2:
            raise ConfigError(f"num_layer_classes must be >= 2, got {self.num_layer_classes}")
        if self.shuffle < 1:
            raise ConfigError(f"segmentation pixel-shuffle factor must be >= 1 (patch {self.patch})")
        if self.seg_head_width % (self.shuffle ** 2):
            raise ConfigError(
                f"seg_head_width {self.seg_head_width} not divisible by {self.shuffle}^2 cells"
            )

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["modalities"] = list(self.modalities)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ModelConfig keys: {sorted(unknown)}")
        kw = dict(d)
        if "modalities" in kw:
            kw["modalities"] = tuple(kw["modalities"])
        return cls(**kw)


# ---------------------------------------------------------------------------
# patch algebra


def patchify(plane, p: int):
    """Split a (..., H, W) grid into (..., P, p*p) raster-ordered patches.

    Works on numpy arrays and torch tensors alike.
    """
    h, w = plane.shape[-2:]
    if h % p:
        raise ShapeError(f"height {h} not divisible by patch size {p}")
    if w % p:
        raise ShapeError(f"width {w} not divisible by patch size {p}")
    lead = tuple(plane.shape[:-2])
    x = plane.reshape(*lead, h // p, p, w // p, p)
    x = x.swapaxes(-3, -2)
    return x.reshape(*lead, (h // p) * (w // p), p * p)


def unpatchify(patches, p: int, h: int, w: int):
    """Inverse of :func:`patchify`."""
    n, k = patches.shape[-2:]
    if k != p * p or n * k != h * w or h % p or w % p:
        raise ShapeError(f"{n} patches of {k} elements cannot tile a {h}x{w} grid with p={p}")
    lead = tuple(patches.shape[:-2])
    x = patches.reshape(*lead, h // p, w // p, p, p)
    x = x.swapaxes(-3, -2)
    return x.reshape(*lead, h, w)


# ---------------------------------------------------------------------------
# analytic parameter counting


def _block_params(d: int, hidden: int) -> int:
    norms = 4 * d
    attn = 3 * d * d + 3 * d + d * d + d
    mlp = d * hidden + hidden + hidden * d + d
    return norms + attn + mlp


def _encoder_params(cfg: ModelConfig, modalities: Sequence[Modality]) -> int:
    d, p = cfg.width, cfg.patch
    n = cfg.num_patches * d + d  # fixed positional table + global token
    for m in modalities:
        n += p * p * cfg.in_channels(m) * d + d  # input projection
        n += d  # modality embedding
        if Modality(m).categorical:
            n += cfg.num_layer_classes * cfg.layer_embed_dim
    return n + cfg.depth * _block_params(d, cfg.mlp_hidden)


def _decoder_params(cfg: ModelConfig, modality: Modality) -> int:
    d, dd, p = cfg.width, cfg.decoder_width, cfg.patch
    hidden = int(dd * cfg.mlp_ratio)
    n = d * dd + dd  # context projection
    n += dd + dd + cfg.num_patches * dd  # mask token, modality embedding, positional table
    n += 3 * 2 * dd  # query / context / mlp norms of the cross-attention block
    n += dd * dd + dd + 2 * dd * dd + 2 * dd + dd * dd + dd  # q, kv, out
    n += dd * hidden + hidden + hidden * dd + dd
    n += cfg.decoder_depth * _block_params(dd, hidden)
    n += 2 * dd  # final norm
    k = p * p * cfg.out_channels(modality)
    return n + dd * k + k


def _convnext_head_params(cfg: ModelConfig, num_classes: int) -> int:
    d, c = cfg.width, cfg.seg_channels
    block = 49 * c + c + 2 * c + c * 4 * c + 4 * c + 4 * c * c + c
    return d * cfg.seg_head_width + cfg.seg_head_width + cfg.convnext_depth * block + c * num_classes + num_classes


def count_params(cfg: ModelConfig, mode: str = "pretrain", num_classes: int = 2,
                 modalities: Optional[Sequence[str | Modality]] = None) -> int:
    """Closed-form parameter count, fixed positional tables included.

    ``mode`` is one of ``pretrain``, ``classify``, ``segment`` or ``segment_linear``.
    Downstream modes default to a single OCT input projection.
    """
    if modalities is None:
        mods = cfg.active if mode == "pretrain" else (Modality.OCT,)
    else:
        mods = as_modalities(modalities)
    n = _encoder_params(cfg, mods)
    if mode == "pretrain":
        return n + sum(_decoder_params(cfg, m) for m in mods)
    if num_classes < 1:
        raise ConfigError(f"num_classes must be positive, got {num_classes}")
    if mode == "classify":
        return n + cfg.width * num_classes + num_classes
    if mode == "segment":
        return n + _convnext_head_params(cfg, num_classes)
    if mode == "segment_linear":
        return n + cfg.width * num_classes + num_classes
    raise ConfigError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# checkpoint container

MAGIC = b"RETMAE\x00\x01"

_DTYPE_CODES = {
    np.dtype("float32"): 1,
    np.dtype("float64"): 2,
    np.dtype("int64"): 3,
    np.dtype("int32"): 4,
    np.dtype("uint8"): 5,
    np.dtype("bool"): 6,
    np.dtype("float16"): 7,
    np.dtype("uint16"): 8,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class Checkpoint:
    """Named tensors plus a JSON-serializable manifest."""

    manifest: dict[str, Any] = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.manifest["config"])

    def to_bytes(self) -> bytes:
        chunks = [MAGIC]
        text = json.dumps(self.manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
        chunks.append(struct.pack("<Q", len(text)))
        chunks.append(text)
        for name, arr in self.tensors.items():
            arr = np.asarray(arr)
            if arr.dtype not in _DTYPE_CODES:
                raise DataError(f"tensor {name}: unsupported dtype {arr.dtype}")
            raw_name = name.encode("utf-8")
            chunks.append(struct.pack("<I", len(raw_name)))
            chunks.append(raw_name)
            chunks.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            chunks.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if blob[: len(MAGIC)] != MAGIC:
            raise DataError("not a checkpoint: bad magic")
        pos = len(MAGIC)

        def take(n: int) -> bytes:
            nonlocal pos
            if pos + n > len(blob):
                raise DataError("truncated checkpoint")
            out = blob[pos: pos + n]
            pos += n
            return out

        (mlen,) = struct.unpack("<Q", take(8))
        manifest = json.loads(take(mlen).decode("utf-8"))
        tensors: dict[str, np.ndarray] = {}
        while pos < len(blob):
            (nlen,) = struct.unpack("<I", take(4))
            name = take(nlen).decode("utf-8")
            code, rank = struct.unpack("<BB", take(2))
            if code not in _CODE_DTYPES:
                raise DataError(f"tensor {name}: unknown dtype code {code}")
            shape = struct.unpack(f"<{rank}Q", take(8 * rank))
            dtype = _CODE_DTYPES[code].newbyteorder("<")
            count = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(take(count * dtype.itemsize), dtype=dtype).reshape(shape)
            tensors[name] = arr.astype(dtype.newbyteorder("="), copy=True)
        return cls(manifest=manifest, tensors=tensors)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise DataError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes())
