"""Self-supervised pretraining: schedule, AdamW, the training loop and encoder transfer."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np
import torch

from .core import Checkpoint, ConfigError, DataError, Modality, ModelConfig, NumericError, Sample, patchify
from .data import AugmentPolicy, augment, to_planes
from .masking import MaskingConfig, TokenAllocation, sample_allocation
from .model import Encoder, MultiMAE, load_numpy_state, state_to_numpy
from .objective import LossBreakdown, total_loss

log = logging.getLogger(__name__)

REFERENCE_BATCH = 256


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float = 1e-4
    warmup_epochs: float = 40
    total_epochs: int = 1600
    warmup_start_lr: float = 1e-6
    batch_size: int = 256
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)

    def __post_init__(self) -> None:
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ConfigError("warmup_epochs must lie in [0, total_epochs)")
        if self.base_lr <= 0 or self.warmup_start_lr < 0 or self.weight_decay < 0:
            raise ConfigError("learning rates must be positive and weight decay nonnegative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    @classmethod
    def reference(cls) -> "ScheduleConfig":
        return cls()

    @classmethod
    def desk(cls, **overrides) -> "ScheduleConfig":
        kw = dict(base_lr=0.1, warmup_epochs=20, total_epochs=400, batch_size=8)
        kw.update(overrides)
        return cls(**kw)


def effective_lr(sched: ScheduleConfig, batch_size: Optional[int] = None) -> float:
    """Peak rate under the linear scaling rule."""
    b = sched.batch_size if batch_size is None else batch_size
    if b < 1:
        raise ConfigError("batch_size must be >= 1")
    return sched.base_lr * b / REFERENCE_BATCH


def lr_at(sched: ScheduleConfig, t: float, batch_size: Optional[int] = None) -> float:
    """Rate at fractional epoch ``t``: linear warm-up, then cosine decay to zero."""
    if not 0 <= t <= sched.total_epochs:
        raise ConfigError(f"epoch {t} outside [0, {sched.total_epochs}]")
    peak = effective_lr(sched, batch_size)
    if t < sched.warmup_epochs:
        return sched.warmup_start_lr + (peak - sched.warmup_start_lr) * t / sched.warmup_epochs
    progress = (t - sched.warmup_epochs) / (sched.total_epochs - sched.warmup_epochs)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# AdamW


@dataclass
class AdamState:
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)


def decays(name: str, p: torch.Tensor) -> bool:
    # biases, norms and embedding vectors are 1-D and excluded from decay
    return p.dim() >= 2


@torch.no_grad()
def optimizer_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, Optional[torch.Tensor]],
                   state: AdamState, rate: float, weight_decay: float,
                   betas: tuple[float, float] = (0.9, 0.95), eps: float = 1e-8) -> AdamState:
    """One in-place AdamW update (decoupled decay applied before the Adam step)."""
    for name, g in grads.items():
        if g is not None and not bool(torch.isfinite(g).all()):
            bad = int((~torch.isfinite(g)).sum())
            raise NumericError(f"non-finite gradient in {name} ({bad} of {g.numel()} entries)")
    state.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if weight_decay and decays(name, p):
            p.mul_(1.0 - rate * weight_decay)
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = torch.zeros_like(p)
            state.exp_avg_sq[name] = torch.zeros_like(p)
        v = state.exp_avg_sq[name]
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        p.addcdiv_(m / c1, (v / c2).sqrt().add_(eps), value=-rate)
    return state


class AdamW:
    """Thin stateful wrapper over :func:`optimizer_step` for an nn.Module's trainable tensors."""

    def __init__(self, named_params: Iterable[tuple[str, torch.nn.Parameter]], weight_decay: float,
                 betas: tuple[float, float] = (0.9, 0.95)):
        self.params = {n: p for n, p in named_params if p.requires_grad}
        self.weight_decay = weight_decay
        self.betas = betas
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, rate: float) -> None:
        grads = {n: p.grad for n, p in self.params.items()}
        optimizer_step(self.params, grads, self.state, rate, self.weight_decay, self.betas)


# ---------------------------------------------------------------------------
# training loop


HISTORY_COLUMNS = ("epoch", "l_oct", "l_slo", "l_layers", "total", "lr")


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    history: list[dict[str, float]]
    model: MultiMAE


def step_rng(seed: int, epoch: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, step]))


def targets_for(planes: Mapping[Modality, torch.Tensor], patch: int) -> dict[Modality, torch.Tensor]:
    return {m: patchify(x, patch) for m, x in planes.items()}


def pretrain_step_loss(model: MultiMAE, batch: Sequence[Sample], allocations: Sequence[TokenAllocation],
                       dtype: torch.dtype = torch.float32) -> LossBreakdown:
    cfg = model.cfg
    planes = to_planes(batch, cfg.active, dtype)
    outputs = model(planes, allocations)
    return total_loss(targets_for(planes, cfg.patch), allocations, outputs, cfg.active)


def make_checkpoint(model: torch.nn.Module, cfg: ModelConfig, mode: str, **extra) -> Checkpoint:
    manifest = {"config": cfg.to_dict(), "mode": mode}
    manifest.update(extra)
    return Checkpoint(manifest=manifest, tensors=state_to_numpy(model))


def pretrain_run(samples: Sequence[Sample], cfg: ModelConfig, sched: ScheduleConfig,
                 mask_cfg: MaskingConfig, seed: int = 0, policy: Optional[AugmentPolicy] = None,
                 out_dir: Optional[str | Path] = None, max_steps: Optional[int] = None,
                 dtype: torch.dtype = torch.float32,
                 on_epoch: Optional[Callable[[dict[str, float]], None]] = None) -> PretrainResult:
    """Masked multimodal pretraining; deterministic given ``seed`` on a fixed thread count."""
    if not samples:
        raise DataError("empty pretraining set")
    for s in samples:
        missing = [m.value for m in cfg.active if not s.has(m)]
        if missing:
            raise DataError(f"sample {s.sample_id} lacks {missing}")
        if s.oct.shape != (cfg.image_size, cfg.image_size):
            raise DataError(f"sample {s.sample_id} has shape {s.oct.shape}, config expects {cfg.image_size}")
    policy = AugmentPolicy() if policy is None else policy
    torch.manual_seed(seed)
    model = MultiMAE(cfg).to(dtype)
    opt = AdamW(model.named_parameters(), sched.weight_decay, sched.betas)
    patches = [cfg.num_patches] * len(cfg.active)
    n = len(samples)
    bs = min(sched.batch_size, n)
    steps_per_epoch = math.ceil(n / bs)
    cadence = max(1, sched.total_epochs // 20)
    out = Path(out_dir) if out_dir is not None else None
    history: list[dict[str, float]] = []
    global_step = 0
    epoch = 0
    for epoch in range(sched.total_epochs):
        order = np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(n)
        sums = np.zeros(4)
        lr_epoch = lr_at(sched, epoch, bs)
        done = 0
        for step in range(steps_per_epoch):
            if max_steps is not None and global_step >= max_steps:
                break
            rng = step_rng(seed, epoch, step)
            idx = order[step * bs: (step + 1) * bs]
            if len(idx) < bs:
                # keep the visible-token total rectangular: wrap to fill the last batch
                idx = np.concatenate([idx, order[: bs - len(idx)]])
            batch = [augment(samples[i], rng, policy) for i in idx]
            allocs = [sample_allocation(mask_cfg, patches, rng) for _ in batch]
            rate = lr_at(sched, epoch + step / steps_per_epoch, bs)
            opt.zero_grad()
            try:
                loss = pretrain_step_loss(model, batch, allocs, dtype)
            except DataError as exc:
                raise DataError(f"batch {[samples[i].sample_id for i in idx]}: {exc}") from exc
            if not bool(torch.isfinite(loss.total)):
                raise NumericError(f"non-finite loss at epoch {epoch} step {step}")
            loss.total.backward()
            opt.step(rate)
            f = loss.as_floats()
            sums += [f["l_oct"], f["l_slo"], f["l_layers"], f["total"]]
            done += 1
            global_step += 1
        if done == 0:
            break
        row = {"epoch": epoch, "l_oct": sums[0] / done, "l_slo": sums[1] / done,
               "l_layers": sums[2] / done, "total": sums[3] / done, "lr": lr_epoch}
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        if out is not None and (epoch + 1) % cadence == 0:
            ckpt = make_checkpoint(model, cfg, "pretrain", epoch=epoch + 1, step=global_step, seed=seed)
            ckpt.save(out / "checkpoints" / f"epoch_{epoch + 1:05d}.ckpt")
    final = make_checkpoint(model, cfg, "pretrain", epoch=len(history), step=global_step, seed=seed,
                            schedule=_jsonable(asdict(sched)), masking=asdict(mask_cfg))
    if out is not None:
        final.save(out / "pretrain_final.ckpt")
        write_history(out / "loss_history.csv", history)
    return PretrainResult(checkpoint=final, history=history, model=model)


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def write_history(path: Path, history: Sequence[Mapping[str, float]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([int(row["epoch"])] + [repr(float(row[k])) for k in HISTORY_COLUMNS[1:]])


def read_history(path: Path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def load_pretrained(ckpt: Checkpoint) -> MultiMAE:
    model = MultiMAE(ckpt.config)
    load_numpy_state(model, ckpt.tensors)
    return model


@torch.no_grad()
def layers_from_oct(model: MultiMAE, samples: Sequence[Sample]) -> tuple[float, float]:
    """Predict LAYERS from OCT alone (every OCT token visible, every other token masked).

    Returns (per-pixel accuracy, majority-class baseline), both pooled over all pixels.
    """
    cfg = model.cfg
    if Modality.LAYERS not in cfg.active or Modality.OCT not in cfg.active:
        raise ConfigError("layers_from_oct needs a model with OCT and LAYERS decoders")
    model.eval()
    planes = to_planes(samples, cfg.active)
    vis = [np.arange(cfg.num_patches) if m is Modality.OCT else [] for m in cfg.active]
    allocs = [TokenAllocation.from_indices(vis)] * len(samples)
    pred = model(planes, allocs)[Modality.LAYERS].argmax(-1)
    target = patchify(planes[Modality.LAYERS], cfg.patch)
    counts = torch.bincount(target.reshape(-1), minlength=cfg.num_layer_classes)
    return float((pred == target).double().mean()), float(counts.max()) / target.numel()


# ---------------------------------------------------------------------------
# encoder transfer


def import_encoder(ckpt: Checkpoint, target: ModelConfig,
                   modalities: Optional[Sequence[str | Modality]] = None, seed: int = 0,
                   ) -> tuple[Encoder, dict[str, list[str]]]:
    """Build an encoder for ``target`` initialised from a checkpoint's encoder tensors.

    Tensors under ``encoder.`` (this package's layout) are copied by name. A
    timm-style ``patch_embed.proj.weight`` is channel-collapsed into any input
    projection the checkpoint does not provide. Returns the encoder and a report
    with ``copied``, ``collapsed``, ``fresh`` and ``ignored`` tensor names.
    """
    torch.manual_seed(seed)
    enc = Encoder(target, modalities)
    src = {k[len("encoder."):]: v for k, v in ckpt.tensors.items() if k.startswith("encoder.")}
    if not src:
        src = {k: v for k, v in ckpt.tensors.items() if k.startswith(("blocks.", "global_token", "pos_embed"))}
    own = enc.state_dict()
    mismatched = [f"{k}: {tuple(src[k].shape)} vs {tuple(v.shape)}" for k, v in own.items()
                  if k in src and tuple(src[k].shape) != tuple(v.shape)]
    src_blocks = {k.split(".")[1] for k in src if k.startswith("blocks.")}
    if len(src_blocks) not in (0, target.depth):
        mismatched.append(f"blocks: source depth {len(src_blocks)} vs target {target.depth}")
    src_cfg = ckpt.manifest.get("config", {})
    if src_cfg and int(src_cfg.get("heads", target.heads)) != target.heads:
        mismatched.append(f"heads: source {src_cfg['heads']} vs target {target.heads}")
    if mismatched:
        raise ConfigError("incompatible encoder: " + "; ".join(mismatched))

    report: dict[str, list[str]] = {"copied": [], "collapsed": [], "fresh": [], "ignored": []}
    new_state = dict(own)
    for k, v in own.items():
        if k in src:
            new_state[k] = torch.from_numpy(np.array(src[k])).to(v.dtype)
            report["copied"].append(k)
    patch_w = ckpt.tensors.get("patch_embed.proj.weight")
    for m in enc.modalities:
        wk = f"proj.{m.value}.weight"
        if wk in report["copied"] or patch_w is None or m.categorical:
            continue
        collapsed = np.asarray(patch_w).sum(axis=1).reshape(patch_w.shape[0], -1)
        if collapsed.shape == tuple(own[wk].shape):
            new_state[wk] = torch.from_numpy(collapsed).to(own[wk].dtype)
            bias = ckpt.tensors.get("patch_embed.proj.bias")
            if bias is not None:
                new_state[f"proj.{m.value}.bias"] = torch.from_numpy(np.array(bias)).to(own[wk].dtype)
            report["collapsed"].append(wk)
    touched = set(report["copied"]) | set(report["collapsed"])
    collapsed_bias = {k.replace(".weight", ".bias") for k in report["collapsed"]}
    report["fresh"] = sorted(k for k in own if k not in touched and k not in collapsed_bias)
    report["ignored"] = sorted(k for k in src if k not in own)
    enc.load_state_dict(new_state)
    return enc, report
