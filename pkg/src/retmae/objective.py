"""Masked reconstruction loss: L2 on intensity patches, cross-entropy on layer maps."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import DataError, Modality, ShapeError
from .masking import TokenAllocation


@dataclass
class LossBreakdown:
    l_oct: torch.Tensor
    l_slo: torch.Tensor
    l_layers: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("l_oct", "l_slo", "l_layers", "total")}


def _mask_tensor(masked, n: int, num_patches: int) -> torch.Tensor:
    """Accepts a bool (N, P) tensor or a per-sample list of masked index arrays."""
    if isinstance(masked, torch.Tensor) and masked.dtype == torch.bool:
        if masked.shape != (n, num_patches):
            raise ShapeError(f"mask shape {tuple(masked.shape)} != {(n, num_patches)}")
        return masked
    if n == 1 and (len(masked) == 0 or np.ndim(masked[0]) == 0):
        masked = [masked]
    if len(masked) != n:
        raise ShapeError(f"{len(masked)} masked index sets for batch {n}")
    out = torch.zeros(n, num_patches, dtype=torch.bool)
    for i, ix in enumerate(masked):
        ix = np.asarray(ix, dtype=np.int64)
        if ix.size and (ix.min() < 0 or ix.max() >= num_patches):
            raise ShapeError(f"masked index out of range [0, {num_patches})")
        out[i, torch.from_numpy(ix)] = True
    return out


def _masked_mean(per_patch: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    # per sample mean over masked patches (0 when none), then batch mean
    w = mask.to(per_patch.dtype)
    counts = w.sum(dim=1)
    per_sample = (per_patch * w).sum(dim=1) / counts.clamp(min=1)
    return per_sample.mean()


def masked_l2(pred: torch.Tensor, target: torch.Tensor, masked) -> torch.Tensor:
    """Mean over masked patches of the per-patch mean squared error.

    pred/target: (N, P, k) or a single (P, k) sample; ``masked`` is a bool (N, P)
    tensor or a list of masked patch index arrays.
    """
    if pred.dim() == 2:
        pred, target = pred[None], target[None]
    if pred.shape != target.shape:
        raise ShapeError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    mask = _mask_tensor(masked, pred.shape[0], pred.shape[1])
    per_patch = ((pred - target.to(pred.dtype)) ** 2).mean(dim=-1)
    return _masked_mean(per_patch, mask)


def masked_ce(logits: torch.Tensor, target: torch.Tensor, masked) -> torch.Tensor:
    """Mean over masked patches of the per-patch mean pixel cross-entropy.

    logits: (N, P, k, C); target: (N, P, k) class indices.
    """
    if logits.dim() == 3:
        logits, target = logits[None], target[None]
    if logits.shape[:-1] != target.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
    num_classes = logits.shape[-1]
    target = target.long()
    if target.numel() and (target.min() < 0 or target.max() >= num_classes):
        raise DataError(f"target class outside [0, {num_classes})")
    mask = _mask_tensor(masked, logits.shape[0], logits.shape[1])
    logp = F.log_softmax(logits, dim=-1)
    nll = -torch.gather(logp, -1, target[..., None])[..., 0]
    return _masked_mean(nll.mean(dim=-1), mask)


def masked_sets(allocations: Sequence[TokenAllocation], j: int, num_patches: int) -> torch.Tensor:
    """Bool (N, P) mask of hidden patches of the j-th modality."""
    vis = np.stack([a.visible_mask(j, num_patches) for a in allocations])
    return torch.from_numpy(~vis)


def total_loss(targets: Mapping[Modality, torch.Tensor], allocations: Sequence[TokenAllocation],
               outputs: Mapping[Modality, torch.Tensor],
               modalities: Sequence[Modality] = (Modality.OCT, Modality.SLO, Modality.LAYERS),
               ) -> LossBreakdown:
    """Unweighted sum of the per-modality masked losses.

    ``targets`` holds patchified ground truth: (N, P, k) floats for intensity
    planes, (N, P, k) class indices for layers. Modalities missing from
    ``outputs`` contribute zero.
    """
    ref = next(iter(outputs.values()))
    zero = torch.zeros((), dtype=ref.dtype if ref.is_floating_point() else torch.float32)
    parts = {m: zero for m in (Modality.OCT, Modality.SLO, Modality.LAYERS)}
    for j, m in enumerate(modalities):
        if m not in outputs:
            continue
        pred = outputs[m]
        mask = masked_sets(allocations, j, pred.shape[1])
        if m.categorical:
            parts[m] = masked_ce(pred, targets[m], mask)
        else:
            parts[m] = masked_l2(pred, targets[m], mask)
    total = parts[Modality.OCT] + parts[Modality.SLO] + parts[Modality.LAYERS]
    return LossBreakdown(parts[Modality.OCT], parts[Modality.SLO], parts[Modality.LAYERS], total)
