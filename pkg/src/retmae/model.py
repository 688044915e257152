"""Multimodal ViT encoder, cross-attention reconstruction decoders and task heads."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ALL_MODALITIES, ConfigError, DataError, Modality, ModelConfig, as_modalities, patchify
from .masking import TokenAllocation

GLOBAL = -1


def modality_code(m: Modality | str) -> int:
    return ALL_MODALITIES.index(Modality(m))


def sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    half = dim // 2
    out = np.zeros((len(pos), dim), dtype=np.float64)
    if half == 0:
        return out
    omega = 1.0 / 10000 ** (np.arange(half, dtype=np.float64) / half)
    angles = np.outer(pos, omega)
    out[:, :half] = np.sin(angles)
    out[:, half: 2 * half] = np.cos(angles)
    return out


def sincos_2d(dim: int, grid: int) -> np.ndarray:
    """Fixed 2-D sin-cos table of shape (grid*grid, dim), raster order.

    The first half of the channels encodes the row, the second half the column.
    """
    rows, cols = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    dim_r = dim // 2
    return np.concatenate([sincos_1d(dim_r, rows.ravel()), sincos_1d(dim - dim_r, cols.ravel())], axis=1)


def _fixed(table: np.ndarray) -> nn.Parameter:
    return nn.Parameter(torch.from_numpy(table).float(), requires_grad=False)


# ---------------------------------------------------------------------------
# transformer pieces


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


def _attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    # q: (N, H, Tq, hd), k/v: (N, H, Tk, hd)
    scale = 1.0 / math.sqrt(q.shape[-1])
    weights = torch.softmax((q @ k.transpose(-2, -1)) * scale, dim=-1)
    return weights @ v


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, t, c = x.shape
        qkv = self.qkv(x).reshape(n, t, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        out = _attend(qkv[0], qkv[1], qkv[2])
        return self.proj(out.transpose(1, 2).reshape(n, t, c))


class CrossAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        n, t, c = x.shape
        s = context.shape[1]
        hd = c // self.heads
        q = self.q(x).reshape(n, t, self.heads, hd).transpose(1, 2)
        kv = self.kv(context).reshape(n, s, 2, self.heads, hd).permute(2, 0, 3, 1, 4)
        out = _attend(q, kv[0], kv[1])
        return self.proj(out.transpose(1, 2).reshape(n, t, c))


class Block(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class CrossBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_ctx = nn.LayerNorm(dim)
        self.attn = CrossAttention(dim, heads)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm_q(x), self.norm_ctx(context))
        return x + self.mlp(self.norm_mlp(x))


def init_weights(module: nn.Module) -> None:
    for sub in module.modules():
        if isinstance(sub, nn.Linear):
            nn.init.xavier_uniform_(sub.weight)
            nn.init.zeros_(sub.bias)
        elif isinstance(sub, nn.LayerNorm):
            nn.init.ones_(sub.weight)
            nn.init.zeros_(sub.bias)


# ---------------------------------------------------------------------------
# tokens


@dataclass
class TokenSequence:
    """Batched tokens with provenance; position 0 is always the global token.

    ``modality`` holds the index into ``ALL_MODALITIES`` (or -1 for the global
    token) and ``patch`` the raster patch index (or -1).
    """

    tokens: torch.Tensor  # (N, T, d)
    modality: torch.Tensor  # (N, T) long
    patch: torch.Tensor  # (N, T) long

    def __len__(self) -> int:
        return self.tokens.shape[1]

    def with_tokens(self, tokens: torch.Tensor) -> "TokenSequence":
        return replace(self, tokens=tokens)


def _as_batch(planes: Mapping, m: Modality):
    x = planes.get(m, planes.get(m.value)) if isinstance(planes, Mapping) else None
    if x is None:
        return None
    x = torch.as_tensor(x)
    return x[None] if x.dim() == 2 else x


class Encoder(nn.Module):
    """Modality projections, fixed positional table, global token and ViT blocks."""

    def __init__(self, cfg: ModelConfig, modalities: Optional[Sequence[str | Modality]] = None):
        super().__init__()
        self.cfg = cfg
        self.modalities = as_modalities(modalities) if modalities is not None else cfg.active
        d, p = cfg.width, cfg.patch
        self.proj = nn.ModuleDict({m.value: nn.Linear(p * p * cfg.in_channels(m), d) for m in self.modalities})
        if Modality.LAYERS in self.modalities:
            self.layer_embed = nn.Parameter(torch.zeros(cfg.num_layer_classes, cfg.layer_embed_dim))
        self.pos_embed = _fixed(sincos_2d(d, cfg.grid))
        self.modality_embed = nn.ParameterDict({m.value: nn.Parameter(torch.zeros(d)) for m in self.modalities})
        self.global_token = nn.Parameter(torch.zeros(d))
        self.blocks = nn.ModuleList([Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)])
        init_weights(self)
        with torch.no_grad():
            for prm in [self.global_token, *self.modality_embed.values()]:
                nn.init.normal_(prm, std=0.02)
            if Modality.LAYERS in self.modalities:
                # spread class codes over [-1, 1] so distinct classes start distinguishable
                c = cfg.num_layer_classes
                self.layer_embed.copy_(torch.linspace(-1, 1, c)[:, None].expand(c, cfg.layer_embed_dim))

    def flatten_patches(self, m: Modality, plane: torch.Tensor) -> torch.Tensor:
        """(N, H, W) plane -> (N, P, p*p*c_in) model inputs."""
        p = self.cfg.patch
        if m.categorical:
            plane = plane.long()
            if plane.numel() and (plane.min() < 0 or plane.max() >= self.cfg.num_layer_classes):
                raise DataError(f"layer class outside [0, {self.cfg.num_layer_classes})")
            emb = self.layer_embed[plane]  # (N, H, W, e)
            x = patchify(emb.permute(0, 3, 1, 2), p)  # (N, e, P, p*p)
            return x.permute(0, 2, 3, 1).reshape(x.shape[0], x.shape[2], -1)
        return patchify(plane.to(self.pos_embed.dtype), p)

    def patch_tokens(self, m: Modality, plane: torch.Tensor) -> torch.Tensor:
        x = self.proj[m.value](self.flatten_patches(m, plane))
        return x + self.pos_embed + self.modality_embed[m.value]

    def project_tokens(self, planes: Mapping, allocations: Optional[Sequence[TokenAllocation]] = None,
                       ) -> TokenSequence:
        """Tokens for the visible patches, global token prepended.

        ``allocations`` holds one TokenAllocation per batch element with counts in
        the order of ``self.modalities``; ``None`` means every patch of every
        present modality is visible.
        """
        present = [m for m in self.modalities if _as_batch(planes, m) is not None]
        if not present:
            raise DataError("no input modality present")
        n = _as_batch(planes, present[0]).shape[0]
        num_p = self.cfg.num_patches
        if allocations is None:
            allocations = [TokenAllocation.full([num_p if m in present else 0 for m in self.modalities])] * n
        if len(allocations) != n:
            raise DataError(f"{len(allocations)} allocations for a batch of {n}")

        flat_idx, mod_ids, patch_ids = [], [], []
        for alloc in allocations:
            if len(alloc.counts) != len(self.modalities):
                raise DataError(f"allocation covers {len(alloc.counts)} modalities, encoder has {len(self.modalities)}")
            fi, mi, pi = [], [], []
            for j, m in enumerate(self.modalities):
                idx = alloc.indices[j]
                if len(idx) == 0:
                    continue
                if m not in present:
                    raise DataError(f"allocation references missing modality {m.value}")
                if idx.min() < 0 or idx.max() >= num_p:
                    raise DataError(f"patch index out of range for {m.value}")
                fi.append(idx + present.index(m) * num_p)
                mi.append(np.full(len(idx), modality_code(m)))
                pi.append(idx)
            flat_idx.append(np.concatenate(fi) if fi else np.zeros(0, dtype=np.int64))
            mod_ids.append(np.concatenate(mi) if mi else np.zeros(0, dtype=np.int64))
            patch_ids.append(np.concatenate(pi) if pi else np.zeros(0, dtype=np.int64))
        if len({len(f) for f in flat_idx}) != 1:
            raise DataError("allocations in one batch must share the same visible-token total")

        all_tokens = torch.cat([self.patch_tokens(m, _as_batch(planes, m)) for m in present], dim=1)
        index = torch.from_numpy(np.stack(flat_idx)).long()
        visible = torch.gather(all_tokens, 1, index[..., None].expand(-1, -1, all_tokens.shape[-1]))
        glob = self.global_token.expand(n, 1, -1)
        lead = torch.full((n, 1), GLOBAL, dtype=torch.long)
        return TokenSequence(
            tokens=torch.cat([glob, visible], dim=1),
            modality=torch.cat([lead, torch.from_numpy(np.stack(mod_ids)).long()], dim=1),
            patch=torch.cat([lead, torch.from_numpy(np.stack(patch_ids)).long()], dim=1),
        )

    def encode(self, seq: TokenSequence) -> TokenSequence:
        x = seq.tokens
        for blk in self.blocks:
            x = blk(x)
        return seq.with_tokens(x)

    def forward(self, planes: Mapping, allocations: Optional[Sequence[TokenAllocation]] = None) -> TokenSequence:
        return self.encode(self.project_tokens(planes, allocations))


def grid_lookup(seq: TokenSequence, m: Modality, num_patches: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-patch sequence position of modality ``m`` tokens and a visibility mask."""
    n, t = seq.modality.shape
    hit = seq.modality == modality_code(m)
    target = torch.where(hit, seq.patch, torch.full_like(seq.patch, num_patches))
    pos = torch.zeros(n, num_patches + 1, dtype=torch.long)
    pos.scatter_(1, target, torch.arange(t).expand(n, t))
    vis = torch.zeros(n, num_patches + 1, dtype=torch.bool)
    vis.scatter_(1, target, hit)
    return pos[:, :num_patches], vis[:, :num_patches]


# ---------------------------------------------------------------------------
# pretraining decoders


class ReconstructionDecoder(nn.Module):
    """Context projection, one cross-attention block, self-attention blocks, patch head."""

    def __init__(self, cfg: ModelConfig, modality: Modality | str):
        super().__init__()
        self.cfg = cfg
        self.modality = Modality(modality)
        dd, p = cfg.decoder_width, cfg.patch
        self.c_out = cfg.out_channels(self.modality)
        self.context_proj = nn.Linear(cfg.width, dd)
        self.mask_token = nn.Parameter(torch.zeros(dd))
        self.modality_embed = nn.Parameter(torch.zeros(dd))
        self.pos_embed = _fixed(sincos_2d(dd, cfg.grid))
        self.cross = CrossBlock(dd, cfg.decoder_heads, cfg.mlp_ratio)
        self.blocks = nn.ModuleList([Block(dd, cfg.decoder_heads, cfg.mlp_ratio) for _ in range(cfg.decoder_depth)])
        self.norm = nn.LayerNorm(dd)
        self.head = nn.Linear(dd, p * p * self.c_out)
        init_weights(self)
        with torch.no_grad():
            nn.init.normal_(self.mask_token, std=0.02)
            nn.init.normal_(self.modality_embed, std=0.02)

    def forward(self, encoded: TokenSequence) -> torch.Tensor:
        """Predictions for every patch: (N, P, p*p) or (N, P, p*p, C) logits for layers."""
        num_p = self.cfg.num_patches
        context = self.context_proj(encoded.tokens)
        pos, vis = grid_lookup(encoded, self.modality, num_p)
        gathered = torch.gather(context, 1, pos[..., None].expand(-1, -1, context.shape[-1]))
        queries = torch.where(vis[..., None], gathered, self.mask_token.expand_as(gathered))
        x = queries + self.pos_embed + self.modality_embed
        x = self.cross(x, context)
        for blk in self.blocks:
            x = blk(x)
        out = self.head(self.norm(x))
        if self.c_out == 1:
            return out
        n = out.shape[0]
        # channel-minor layout: (p*p, C) per patch
        return out.reshape(n, num_p, self.cfg.patch ** 2, self.c_out)


class MultiMAE(nn.Module):
    """Encoder plus one reconstruction decoder per active modality."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoders = nn.ModuleDict({m.value: ReconstructionDecoder(cfg, m) for m in cfg.active})

    def decode_modality(self, encoded: TokenSequence, modality: Modality | str) -> torch.Tensor:
        key = Modality(modality).value
        if key not in self.decoders:
            raise ConfigError(f"no decoder for modality {key}")
        return self.decoders[key](encoded)

    def forward(self, planes: Mapping, allocations: Optional[Sequence[TokenAllocation]] = None,
                ) -> dict[Modality, torch.Tensor]:
        encoded = self.encoder(planes, allocations)
        return {m: self.decode_modality(encoded, m) for m in self.cfg.active}


# ---------------------------------------------------------------------------
# downstream heads


def _patch_tokens(encoded: TokenSequence) -> torch.Tensor:
    if encoded.tokens.shape[1] < 2:
        raise DataError("no non-global tokens to pool")
    return encoded.tokens[:, 1:]


class ClassificationHead(nn.Module):
    def __init__(self, dim: int, num_classes: int):
        super().__init__()
        self.linear = nn.Linear(dim, num_classes)
        nn.init.zeros_(self.linear.bias)
        nn.init.normal_(self.linear.weight, std=0.01)

    def logits(self, encoded: TokenSequence) -> torch.Tensor:
        return self.linear(_patch_tokens(encoded).mean(dim=1))

    def forward(self, encoded: TokenSequence) -> torch.Tensor:
        return torch.softmax(self.logits(encoded), dim=-1)


def token_grid(encoded: TokenSequence, m: Modality, cfg: ModelConfig) -> torch.Tensor:
    """(N, d, gh, gw) map of modality ``m`` tokens; requires the full patch grid."""
    pos, vis = grid_lookup(encoded, m, cfg.num_patches)
    if not bool(vis.all()):
        raise DataError(f"segmentation needs every {m.value} patch visible")
    x = torch.gather(encoded.tokens, 1, pos[..., None].expand(-1, -1, encoded.tokens.shape[-1]))
    n = x.shape[0]
    return x.transpose(1, 2).reshape(n, -1, cfg.grid, cfg.grid)


class ConvNeXtBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dwconv = nn.Conv2d(dim, dim, kernel_size=7, padding=3, groups=dim)
        self.norm = nn.LayerNorm(dim)
        self.pwconv1 = nn.Linear(dim, 4 * dim)
        self.pwconv2 = nn.Linear(4 * dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.dwconv(x).permute(0, 2, 3, 1)
        y = self.pwconv2(F.gelu(self.pwconv1(self.norm(y))))
        return x + y.permute(0, 3, 1, 2)


class ConvNeXtSegHead(nn.Module):
    """Token projection, pixel shuffle, ConvNeXt blocks, 1x1 classifier, bilinear upsampling."""

    def __init__(self, cfg: ModelConfig, num_classes: int, modality: Modality | str = Modality.OCT):
        super().__init__()
        if cfg.seg_head_width % (cfg.shuffle ** 2):
            raise ConfigError("seg_head_width not divisible by the pixel-shuffle cell count")
        self.cfg = cfg
        self.modality = Modality(modality)
        c = cfg.seg_channels
        self.proj = nn.Linear(cfg.width, cfg.seg_head_width)
        self.blocks = nn.ModuleList([ConvNeXtBlock(c) for _ in range(cfg.convnext_depth)])
        self.classifier = nn.Conv2d(c, num_classes, kernel_size=1)
        init_weights(self)
        for blk in self.blocks:
            # residual branch starts silent: each block begins as the identity
            nn.init.zeros_(blk.pwconv2.weight)

    def feature_map(self, encoded: TokenSequence) -> torch.Tensor:
        cfg = self.cfg
        grid = token_grid(encoded, self.modality, cfg)  # (N, d, g, g)
        n, _, g, _ = grid.shape
        x = self.proj(grid.permute(0, 2, 3, 1))  # (N, g, g, W)
        s, c = cfg.shuffle, cfg.seg_channels
        x = x.reshape(n, g, g, s, s, c).permute(0, 5, 1, 3, 2, 4)
        return x.reshape(n, c, g * s, g * s)

    def forward(self, encoded: TokenSequence) -> torch.Tensor:
        x = self.feature_map(encoded)
        for blk in self.blocks:
            x = blk(x)
        x = self.classifier(x)
        size = self.cfg.image_size
        return F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)


class LinearSegHead(nn.Module):
    """1x1 convolution on the token grid followed by bicubic upsampling."""

    def __init__(self, cfg: ModelConfig, num_classes: int, modality: Modality | str = Modality.OCT):
        super().__init__()
        self.cfg = cfg
        self.modality = Modality(modality)
        self.linear = nn.Linear(cfg.width, num_classes)
        init_weights(self)

    def forward(self, encoded: TokenSequence) -> torch.Tensor:
        grid = token_grid(encoded, self.modality, self.cfg)
        x = self.linear(grid.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
        size = self.cfg.image_size
        return F.interpolate(x, size=(size, size), mode="bicubic", align_corners=False)


class Classifier(nn.Module):
    def __init__(self, cfg: ModelConfig, num_classes: int, modalities: Sequence[str | Modality] = ("OCT",)):
        super().__init__()
        self.cfg = cfg
        self.num_classes = num_classes
        self.encoder = Encoder(cfg, modalities)
        self.head = ClassificationHead(cfg.width, num_classes)

    def forward(self, planes: Mapping) -> torch.Tensor:
        """Class logits."""
        return self.head.logits(self.encoder(planes))

    def predict_proba(self, planes: Mapping) -> torch.Tensor:
        return torch.softmax(self.forward(planes), dim=-1)


class Segmenter(nn.Module):
    def __init__(self, cfg: ModelConfig, num_classes: int, head: str = "convnext",
                 modalities: Sequence[str | Modality] = ("OCT",)):
        super().__init__()
        self.cfg = cfg
        self.num_classes = num_classes
        self.head_kind = head
        self.encoder = Encoder(cfg, modalities)
        target = self.encoder.modalities[0]
        if head == "convnext":
            self.head = ConvNeXtSegHead(cfg, num_classes, target)
        elif head == "linear":
            self.head = LinearSegHead(cfg, num_classes, target)
        else:
            raise ConfigError(f"unknown segmentation head {head!r}")

    def forward(self, planes: Mapping) -> torch.Tensor:
        """(N, K, H, W) logits."""
        return self.head(self.encoder(planes))


def num_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# checkpoint bridging


def state_to_numpy(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_numpy_state(module: nn.Module, tensors: Mapping[str, np.ndarray], strict: bool = True) -> None:
    state = {k: torch.from_numpy(np.array(v)) for k, v in tensors.items()}
    missing, unexpected = module.load_state_dict(state, strict=False)
    if strict and (missing or unexpected):
        raise DataError(f"checkpoint mismatch: missing={missing} unexpected={unexpected}")
