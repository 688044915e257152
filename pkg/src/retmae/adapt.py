"""Downstream tuning: linear probing and segmentation decoders on a pretrained encoder."""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .core import Checkpoint, ConfigError, DataError, Modality, ModelConfig, Sample, as_modalities
from .data import AugmentPolicy, augment, random_crop, to_planes
from .metrics import auroc_weighted_ovr, average_precision_weighted, balanced_accuracy, dice, replica_summary
from .model import Classifier, Segmenter, load_numpy_state
from .pretrain import AdamW, import_encoder, make_checkpoint

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# protocols


@dataclass(frozen=True)
class ProbeProtocol:
    max_epochs: int = 1000
    lr: float = 1e-3
    weight_decay: float = 1e-2
    label_smoothing: float = 0.1
    early_stop_from: int = 20
    patience: int = 20
    min_improvement: float = 0.001  # BAcc fraction, i.e. 0.1 percentage points
    batch_fraction: float = 0.25
    batch_cap: int = 64
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    augment: bool = True
    betas: tuple[float, float] = (0.9, 0.95)

    def __post_init__(self) -> None:
        if min(self.max_epochs, self.lr, self.patience, self.batch_cap, self.batch_fraction) <= 0:
            raise ConfigError("probe protocol fields must be positive")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.weight_decay < 0 or self.early_stop_from < 0 or self.min_improvement < 0:
            raise ConfigError("weight_decay, early_stop_from and min_improvement must be nonnegative")
        if not self.seeds:
            raise ConfigError("at least one seed required")

    def batch_size(self, n_train: int) -> int:
        return min(self.batch_cap, math.ceil(self.batch_fraction * n_train))


@dataclass(frozen=True)
class SegProtocol:
    epochs: int = 200
    lr: float = 1e-4
    batch: int = 4
    crop: int = 1024
    mode: str = "decoder_only"
    weight_decay: float = 0.05
    flip_prob: float = 0.5
    betas: tuple[float, float] = (0.9, 0.95)

    def __post_init__(self) -> None:
        if self.mode not in ("decoder_only", "full_fine_tune"):
            raise ConfigError(f"unknown tuning mode {self.mode!r}")
        if min(self.epochs, self.lr, self.batch, self.crop) <= 0:
            raise ConfigError("segmentation protocol fields must be positive")

    def crop_for(self, image_size: int) -> int:
        return min(self.crop, image_size)


# ---------------------------------------------------------------------------
# model selection


class EarlyStopper:
    """Best-checkpoint tracking and patience on validation BAcc.

    Epochs are numbered from 1. A checkpoint is kept when BAcc beats the best so
    far, or equals it with a lower loss. Patience resets only on an improvement of
    at least ``min_improvement`` over the last reference value, and stopping is
    allowed from ``start`` onward.
    """

    def __init__(self, start: int = 20, patience: int = 20, min_improvement: float = 0.001):
        self.start = start
        self.patience = patience
        self.min_improvement = min_improvement
        self.best_bacc = -math.inf
        self.best_loss = math.inf
        self.best_epoch = 0
        self.reference = -math.inf
        self.wait = 0

    def update(self, epoch: int, bacc: float, loss: float) -> tuple[bool, bool]:
        """Returns (save, stop)."""
        save = bacc > self.best_bacc or (bacc == self.best_bacc and loss < self.best_loss)
        if save:
            self.best_bacc, self.best_loss, self.best_epoch = bacc, loss, epoch
        # small slack so 0.1 pp steps survive float rounding
        if bacc - self.reference >= self.min_improvement - 1e-12:
            self.reference = bacc
            self.wait = 0
        else:
            self.wait += 1
        return save, epoch >= self.start and self.wait >= self.patience


def smooth_targets(labels: torch.Tensor, num_classes: int, eps: float) -> torch.Tensor:
    onehot = F.one_hot(labels.long(), num_classes).to(torch.float64)
    return onehot * (1.0 - eps) + eps / num_classes


def smoothed_ce(logits: torch.Tensor, labels: torch.Tensor, eps: float) -> torch.Tensor:
    target = smooth_targets(labels, logits.shape[-1], eps).to(logits.dtype)
    return -(target * torch.log_softmax(logits, dim=-1)).sum(-1).mean()


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(n)


def _write_trace(path: Path, trace: Sequence[Mapping[str, float]], metric: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", metric, "loss"))
        for row in trace:
            w.writerow((int(row["epoch"]), repr(float(row[metric])), repr(float(row["loss"]))))


# ---------------------------------------------------------------------------
# linear probing


@dataclass
class ProbeResult:
    model: Classifier
    trace: list[dict[str, float]]
    best_epoch: int
    seed: int

    def checkpoint(self) -> Checkpoint:
        m = self.model
        return make_checkpoint(m, m.cfg, "probe", num_classes=m.num_classes, seed=self.seed,
                               best_epoch=self.best_epoch,
                               modalities=[x.value for x in m.encoder.modalities])


def _labels(samples: Sequence[Sample]) -> np.ndarray:
    missing = [s.sample_id for s in samples if s.label is None]
    if missing:
        raise DataError(f"unlabelled samples: {missing[:5]}")
    return np.array([s.label for s in samples], dtype=np.int64)


def build_classifier(encoder_source: Optional[Checkpoint], cfg: ModelConfig, num_classes: int,
                     modalities: Sequence[str | Modality] = ("OCT",), seed: int = 0) -> Classifier:
    torch.manual_seed(seed)
    model = Classifier(cfg, num_classes, modalities)
    if encoder_source is not None:
        enc, _ = import_encoder(encoder_source, cfg, modalities, seed)
        model.encoder.load_state_dict(enc.state_dict())
    return model


@torch.no_grad()
def pooled_features(model: Classifier, samples: Sequence[Sample], batch: int = 32) -> torch.Tensor:
    model.eval()
    feats = []
    for i in range(0, len(samples), batch):
        planes = to_planes(samples[i: i + batch], model.encoder.modalities)
        feats.append(model.encoder(planes).tokens[:, 1:].mean(dim=1))
    return torch.cat(feats)


def fit_linear_head(head: torch.nn.Linear, train_x: torch.Tensor, train_y: np.ndarray,
                    val_x: torch.Tensor, val_y: np.ndarray, protocol: ProbeProtocol, seed: int,
                    features_for_epoch: Optional[Callable[[int], torch.Tensor]] = None,
                    ) -> tuple[list[dict[str, float]], int]:
    """Train ``head`` on fixed (or per-epoch augmented) features with early stopping.

    The head is left holding the selected best weights.
    """
    n = len(train_y)
    bs = protocol.batch_size(n)
    y_train = torch.from_numpy(train_y)
    y_val = torch.from_numpy(val_y)
    opt = AdamW(head.named_parameters(), protocol.weight_decay, protocol.betas)
    stopper = EarlyStopper(protocol.early_stop_from, protocol.patience, protocol.min_improvement)
    best_state = copy.deepcopy(head.state_dict())
    trace = []
    for epoch in range(1, protocol.max_epochs + 1):
        x_epoch = features_for_epoch(epoch) if features_for_epoch is not None else train_x
        order = _epoch_order(seed, epoch, n)
        for i in range(0, n, bs):
            idx = torch.from_numpy(order[i: i + bs])
            opt.zero_grad()
            smoothed_ce(head(x_epoch[idx]), y_train[idx], protocol.label_smoothing).backward()
            opt.step(protocol.lr)
        with torch.no_grad():
            logits = head(val_x)
            loss = float(smoothed_ce(logits, y_val, protocol.label_smoothing))
            bacc = balanced_accuracy(logits.argmax(-1).numpy(), val_y)
        trace.append({"epoch": epoch, "bacc": bacc, "loss": loss})
        save, stop = stopper.update(epoch, bacc, loss)
        if save:
            best_state = copy.deepcopy(head.state_dict())
        if stop:
            break
    head.load_state_dict(best_state)
    return trace, stopper.best_epoch


def probe_train(train: Sequence[Sample], val: Sequence[Sample], cfg: ModelConfig, num_classes: int,
                checkpoint: Optional[Checkpoint] = None, protocol: ProbeProtocol = ProbeProtocol(),
                seed: int = 0, modalities: Sequence[str | Modality] = ("OCT",),
                policy: Optional[AugmentPolicy] = None, out_dir: Optional[str | Path] = None) -> ProbeResult:
    """Linear probe on a frozen encoder, selected on validation BAcc."""
    y_train, y_val = _labels(train), _labels(val)
    absent = sorted(set(range(num_classes)) - set(y_train.tolist()))
    if absent:
        raise DataError(f"classes {absent} absent from the training split; re-stratify")
    if (y_train >= num_classes).any() or (y_val >= num_classes).any():
        raise DataError(f"label outside [0, {num_classes})")
    model = build_classifier(checkpoint, cfg, num_classes, modalities, seed)
    for p in model.encoder.parameters():
        p.requires_grad_(False)
    policy = AugmentPolicy() if policy is None else policy
    val_x = pooled_features(model, val)
    def augmented(epoch: int) -> torch.Tensor:
        rngs = [np.random.default_rng(np.random.SeedSequence([seed, epoch, i])) for i in range(len(train))]
        return pooled_features(model, [augment(s, r, policy) for s, r in zip(train, rngs)])

    # without augmentation the frozen features never change, so compute them once
    if protocol.augment and policy != AugmentPolicy.identity():
        train_x, per_epoch = None, augmented
    else:
        train_x, per_epoch = pooled_features(model, train), None
    trace, best = fit_linear_head(model.head.linear, train_x, y_train, val_x, y_val, protocol, seed, per_epoch)
    result = ProbeResult(model=model, trace=trace, best_epoch=best, seed=seed)
    if out_dir is not None:
        out = Path(out_dir)
        result.checkpoint().save(out / f"probe_seed{seed}.ckpt")
        _write_trace(out / f"probe_trace_seed{seed}.csv", trace, "bacc")
    return result


def load_classifier(ckpt: Checkpoint) -> Classifier:
    if ckpt.manifest.get("mode") != "probe":
        raise ConfigError(f"expected a probe checkpoint, got mode {ckpt.manifest.get('mode')!r}")
    model = Classifier(ckpt.config, int(ckpt.manifest["num_classes"]), ckpt.manifest["modalities"])
    load_numpy_state(model, ckpt.tensors)
    return model


@torch.no_grad()
def probe_predict(samples: Sequence[Sample], model: Classifier,
                  modalities: Optional[Sequence[str | Modality]] = None) -> np.ndarray:
    """(N, K) class probabilities."""
    trained = model.encoder.modalities
    if modalities is not None and as_modalities(modalities) != trained:
        raise ConfigError(f"head trained on {[m.value for m in trained]}, asked for {list(modalities)}")
    for s in samples:
        lacking = [m.value for m in trained if not s.has(m)]
        if lacking:
            raise ConfigError(f"sample {s.sample_id} lacks {lacking} required by the head")
    model.eval()
    feats = pooled_features(model, samples)
    return torch.softmax(model.head.linear(feats).double(), dim=-1).numpy()


def classification_scores(proba: np.ndarray, labels: np.ndarray) -> dict[str, float]:
    return {
        "auroc": auroc_weighted_ovr(proba if proba.shape[1] > 2 else proba[:, 1], labels),
        "ap": average_precision_weighted(proba if proba.shape[1] > 2 else proba[:, 1], labels),
        "bacc": balanced_accuracy(proba.argmax(1), labels),
    }


# ---------------------------------------------------------------------------
# segmentation tuning


@dataclass
class SegResult:
    model: Segmenter
    trace: list[dict[str, float]]
    best_epoch: int
    seed: int
    mode: str

    def checkpoint(self) -> Checkpoint:
        m = self.model
        return make_checkpoint(m, m.cfg, "segment", num_classes=m.num_classes, head=m.head_kind,
                               tuning=self.mode, seed=self.seed, best_epoch=self.best_epoch,
                               modalities=[x.value for x in m.encoder.modalities])


def build_segmenter(encoder_source: Optional[Checkpoint], cfg: ModelConfig, num_classes: int,
                    head: str = "convnext", modalities: Sequence[str | Modality] = ("OCT",),
                    seed: int = 0) -> Segmenter:
    torch.manual_seed(seed)
    model = Segmenter(cfg, num_classes, head, modalities)
    if encoder_source is not None:
        enc, _ = import_encoder(encoder_source, cfg, modalities, seed)
        model.encoder.load_state_dict(enc.state_dict())
    return model


def load_segmenter(ckpt: Checkpoint) -> Segmenter:
    if ckpt.manifest.get("mode") != "segment":
        raise ConfigError(f"expected a segmentation checkpoint, got mode {ckpt.manifest.get('mode')!r}")
    man = ckpt.manifest
    model = Segmenter(ckpt.config, int(man["num_classes"]), man["head"], man["modalities"])
    load_numpy_state(model, ckpt.tensors)
    return model


def _check_masks(samples: Sequence[Sample], num_classes: int) -> None:
    for s in samples:
        if s.mask is None:
            raise DataError(f"sample {s.sample_id} has no segmentation mask")
        if s.mask.min() < 0 or s.mask.max() >= num_classes:
            raise DataError(f"sample {s.sample_id}: mask values outside [0, {num_classes})")


def _resize(sample: Sample, size: int) -> Sample:
    h = sample.oct.shape[0]
    if h == size:
        return sample
    z = size / h

    def inten(p):
        return None if p is None else np.clip(ndimage.zoom(p, z, order=1), 0, 1).astype(np.float32)

    def lab(p):
        return None if p is None else ndimage.zoom(p, z, order=0)

    return sample.replace(oct=inten(sample.oct), slo=inten(sample.slo), layers=lab(sample.layers),
                          mask=lab(sample.mask))


def seg_batch(samples: Sequence[Sample], modalities: Sequence[Modality]) -> tuple[dict, torch.Tensor]:
    planes = to_planes(samples, modalities)
    return planes, torch.from_numpy(np.stack([s.mask for s in samples])).long()


def mean_dice(pred: np.ndarray, true: np.ndarray, num_classes: int) -> float:
    """Foreground Dice averaged over classes and samples; undefined pairs excluded."""
    vals = [dice(p == c, t == c) for p, t in zip(pred, true) for c in range(1, num_classes)]
    vals = [v for v in vals if not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def seg_tune(train: Sequence[Sample], val: Sequence[Sample], cfg: ModelConfig, num_classes: int,
             checkpoint: Optional[Checkpoint] = None, protocol: SegProtocol = SegProtocol(),
             head: str = "convnext", seed: int = 0, modalities: Sequence[str | Modality] = ("OCT",),
             out_dir: Optional[str | Path] = None) -> SegResult:
    """Train a segmentation decoder (and optionally the encoder); best model by validation Dice."""
    _check_masks(train, num_classes)
    _check_masks(val, num_classes)
    model = build_segmenter(checkpoint, cfg, num_classes, head, modalities, seed)
    mods = model.encoder.modalities
    if protocol.mode == "decoder_only":
        for p in model.encoder.parameters():
            p.requires_grad_(False)
    opt = AdamW(model.named_parameters(), protocol.weight_decay, protocol.betas)
    crop = protocol.crop_for(cfg.image_size)
    flip = AugmentPolicy(flip_prob=protocol.flip_prob, rotation_deg=0.0, translate=0.0, scale=(1.0, 1.0),
                         intensity_shift=0.0)
    val_planes, val_masks = seg_batch([_resize(s, cfg.image_size) for s in val], mods)
    best_state = copy.deepcopy(model.state_dict())
    best_dice, best_epoch = -math.inf, 0
    trace = []
    n = len(train)
    for epoch in range(1, protocol.epochs + 1):
        model.train()
        if protocol.mode == "decoder_only":
            model.encoder.eval()
        order = _epoch_order(seed, epoch, n)
        losses = []
        for step, i in enumerate(range(0, n, protocol.batch)):
            rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, step]))
            batch = [_resize(random_crop(augment(train[j], rng, flip), rng, crop), cfg.image_size)
                     for j in order[i: i + protocol.batch]]
            planes, masks = seg_batch(batch, mods)
            opt.zero_grad()
            loss = F.cross_entropy(model(planes), masks)
            loss.backward()
            opt.step(protocol.lr)
            losses.append(float(loss.detach()))
        model.eval()
        with torch.no_grad():
            pred = model(val_planes).argmax(1).numpy()
        d = mean_dice(pred, val_masks.numpy(), num_classes)
        trace.append({"epoch": epoch, "dice": d, "loss": float(np.mean(losses))})
        if d > best_dice:
            best_dice, best_epoch = d, epoch
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    result = SegResult(model=model, trace=trace, best_epoch=best_epoch, seed=seed, mode=protocol.mode)
    if out_dir is not None:
        out = Path(out_dir)
        result.checkpoint().save(out / f"segment_seed{seed}.ckpt")
        _write_trace(out / f"dice_trace_seed{seed}.csv", trace, "dice")
    return result


@torch.no_grad()
def seg_predict(samples: Sequence[Sample], model: Segmenter, batch: int = 16) -> np.ndarray:
    """(N, H, W) argmax class maps at the input resolution."""
    model.eval()
    out = []
    for i in range(0, len(samples), batch):
        chunk = samples[i: i + batch]
        size = chunk[0].oct.shape
        planes = to_planes([_resize(s, model.cfg.image_size) for s in chunk], model.encoder.modalities)
        logits = model(planes)
        if tuple(logits.shape[-2:]) != tuple(size):
            logits = F.interpolate(logits, size=size, mode="bilinear", align_corners=False)
        out.append(logits.argmax(1).numpy())
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# replicas


@dataclass
class ReplicaTable:
    rows: list[dict[str, float]] = field(default_factory=list)  # one per seed

    def summary(self) -> dict[str, tuple[float, float]]:
        keys = [k for k in self.rows[0] if k != "seed"] if self.rows else []
        return {k: replica_summary([r[k] for r in self.rows]) for k in keys}

    def write(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("seed", "metric", "value"))
            for r in self.rows:
                for k, v in r.items():
                    if k != "seed":
                        w.writerow((int(r["seed"]), k, repr(float(v))))


def read_replicas(path: str | Path) -> dict[str, list[float]]:
    """metric -> values ordered by seed."""
    out: dict[str, list[tuple[int, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["seed", "metric", "value"]:
            raise DataError(f"{path}: expected header seed,metric,value")
        for row in reader:
            out.setdefault(row["metric"], []).append((int(row["seed"]), float(row["value"])))
    return {k: [v for _, v in sorted(vals)] for k, vals in out.items()}


def probe_replicas(train: Sequence[Sample], val: Sequence[Sample], test: Sequence[Sample],
                   cfg: ModelConfig, num_classes: int, checkpoint: Optional[Checkpoint] = None,
                   protocol: ProbeProtocol = ProbeProtocol(), modalities: Sequence[str | Modality] = ("OCT",),
                   policy: Optional[AugmentPolicy] = None, out_dir: Optional[str | Path] = None,
                   ) -> tuple[ReplicaTable, list[ProbeResult]]:
    table, results = ReplicaTable(), []
    y_test = _labels(test)
    for seed in protocol.seeds:
        res = probe_train(train, val, cfg, num_classes, checkpoint, protocol, seed, modalities, policy, out_dir)
        scores = classification_scores(probe_predict(test, res.model), y_test)
        table.rows.append({"seed": seed, **scores})
        results.append(res)
    if out_dir is not None:
        table.write(Path(out_dir) / "replicas.csv")
    return table, results
