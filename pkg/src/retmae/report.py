"""Plots and summaries: loss-curve SVG, reconstruction grids and markdown tables."""
from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from PIL import Image

from .core import Modality, Sample, unpatchify
from .data import to_planes
from .masking import TokenAllocation
from .model import MultiMAE

CURVE_COLOURS = {"l_oct": "#1f77b4", "l_slo": "#2ca02c", "l_layers": "#d62728", "total": "#000000"}


def loss_svg(history: Sequence[Mapping[str, float]], width: int = 640, height: int = 360) -> str:
    """Per-modality and total loss curves on a log axis, as a standalone SVG document."""
    pad_l, pad_r, pad_t, pad_b = 60, 110, 20, 40
    keys = [k for k in CURVE_COLOURS if history and k in history[0]]
    vals = [float(r[k]) for r in history for k in keys if float(r[k]) > 0 and math.isfinite(float(r[k]))]
    lo = math.floor(math.log10(min(vals))) if vals else -1
    hi = math.ceil(math.log10(max(vals))) if vals else 0
    hi = max(hi, lo + 1)
    n = max(len(history) - 1, 1)
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def xy(i: int, v: float) -> tuple[float, float]:
        y = (math.log10(max(v, 10.0 ** lo)) - lo) / (hi - lo)
        return pad_l + pw * i / n, pad_t + ph * (1 - y)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<rect x="{pad_l}" y="{pad_t}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>']
    for e in range(lo, hi + 1):
        _, y = xy(0, 10.0 ** e)
        out.append(f'<line x1="{pad_l}" y1="{y:.2f}" x2="{pad_l + pw}" y2="{y:.2f}" stroke="#ddd"/>')
        out.append(f'<text x="{pad_l - 6}" y="{y + 4:.2f}" text-anchor="end">1e{e}</text>')
    for frac in (0.0, 0.5, 1.0):
        x = pad_l + pw * frac
        label = int(round(frac * n))
        out.append(f'<text x="{x:.2f}" y="{pad_t + ph + 16}" text-anchor="middle">{label}</text>')
    out.append(f'<text x="{pad_l + pw / 2:.2f}" y="{height - 6}" text-anchor="middle">epoch</text>')
    for j, k in enumerate(keys):
        pts = " ".join("{:.2f},{:.2f}".format(*xy(i, float(r[k]))) for i, r in enumerate(history))
        out.append(f'<polyline fill="none" stroke="{CURVE_COLOURS[k]}" stroke-width="1.5" points="{pts}"/>')
        ly = pad_t + 14 + 16 * j
        out.append(f'<line x1="{width - pad_r + 10}" y1="{ly - 4}" x2="{width - pad_r + 30}" y2="{ly - 4}" '
                   f'stroke="{CURVE_COLOURS[k]}" stroke-width="2"/>')
        out.append(f'<text x="{width - pad_r + 36}" y="{ly}">{k}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_loss_svg(path: str | Path, history: Sequence[Mapping[str, float]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(loss_svg(history))
    return path


# ---------------------------------------------------------------------------
# reconstructions


def ratio_allocation(model: MultiMAE, target: Modality, ratio: float, seed: int = 0) -> TokenAllocation:
    """Mask ``ratio`` of the target modality's patches; every other modality fully visible."""
    cfg = model.cfg
    P = cfg.num_patches
    keep = P - int(round(ratio * P))
    perm = np.random.default_rng(np.random.SeedSequence([seed, cfg.active.index(target)])).permutation(P)
    idx = [np.sort(perm[:keep]) if m == target else np.arange(P) for m in cfg.active]
    return TokenAllocation.from_indices(idx)


def _display(m: Modality, patches: torch.Tensor, cfg) -> np.ndarray:
    if m.categorical:
        patches = patches.argmax(-1).double() / max(cfg.num_layer_classes - 1, 1)
    s = cfg.image_size
    return unpatchify(patches, cfg.patch, s, s).detach().double().numpy()[0]


@torch.no_grad()
def reconstruct(model: MultiMAE, sample: Sample, target: Modality, ratio: float, seed: int = 0,
                ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(masked input, reconstruction with visible patches pasted back, original) in [0, 1]."""
    cfg = model.cfg
    model.eval()
    planes = to_planes([sample], cfg.active)
    alloc = ratio_allocation(model, target, ratio, seed)
    pred = model(planes, [alloc])[target]
    p = cfg.patch
    original = planes[target][0].double().numpy()
    if target.categorical:
        original = original / max(cfg.num_layer_classes - 1, 1)
    recon = _display(target, pred, cfg)
    vis = alloc.visible_mask(cfg.active.index(target), cfg.num_patches).reshape(cfg.grid, cfg.grid)
    vis_px = np.kron(vis, np.ones((p, p), dtype=bool)).astype(bool)
    masked = np.where(vis_px, original, 0.5)
    recon = np.where(vis_px, original, np.clip(recon, 0, 1))
    return masked, recon, original


def recon_grid(model: MultiMAE, sample: Sample, ratios: Sequence[float] = (0.0, 0.5, 1.0), seed: int = 0,
               gap: int = 2) -> np.ndarray:
    """uint8 grid: one row per modality; per ratio a (masked, reconstructed) pair; original last."""
    cfg = model.cfg
    s = cfg.image_size
    cols = 2 * len(ratios) + 1
    rows = len(cfg.active)
    grid = np.full((rows * (s + gap) - gap, cols * (s + gap) - gap), 255, dtype=np.uint8)
    for r, m in enumerate(cfg.active):
        tiles = []
        original = None
        for ratio in ratios:
            masked, recon, original = reconstruct(model, sample, m, ratio, seed)
            tiles += [masked, recon]
        tiles.append(original)
        for c, t in enumerate(tiles):
            y, x = r * (s + gap), c * (s + gap)
            grid[y: y + s, x: x + s] = np.round(np.clip(t, 0, 1) * 255).astype(np.uint8)
    return grid


def save_recon_grid(path: str | Path, model: MultiMAE, sample: Sample,
                    ratios: Sequence[float] = (0.0, 0.5, 1.0), seed: int = 0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(recon_grid(model, sample, ratios, seed)).save(path)
    return path


# ---------------------------------------------------------------------------
# markdown


def fmt(v: float, digits: int = 4) -> str:
    if isinstance(v, str):
        return v
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "n/a"
    return f"{v:.{digits}f}"


def md_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(fmt(c) for c in row) + " |" for row in rows]
    return "\n".join(lines) + "\n"


def mean_std(mean: float, std: float, digits: int = 4) -> str:
    return f"{mean:.{digits}f} ± {std:.{digits}f}"
