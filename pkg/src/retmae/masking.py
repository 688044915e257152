"""Dirichlet token budgets and uniform visible-patch selection."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import CapacityError, ConfigError

# reference grid the 49/98 budgets were tuned for (512 px images, 32 px patches)
REFERENCE_PATCHES = 256


@dataclass(frozen=True)
class MaskingConfig:
    alpha: float = 1.0
    budget_single: int = 49
    budget_multi: int = 98
    scale_rule: str = "proportional"

    def __post_init__(self) -> None:
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if self.budget_single < 0 or self.budget_multi < 0:
            raise ConfigError("budgets must be nonnegative")
        if self.scale_rule not in ("absolute", "proportional"):
            raise ConfigError(f"scale_rule must be absolute|proportional, got {self.scale_rule!r}")

    def budget(self, patches_per_modality: Sequence[int]) -> int:
        """Visible-token budget for a sample whose modalities have these patch counts."""
        ref = self.budget_single if len(patches_per_modality) == 1 else self.budget_multi
        if self.scale_rule == "proportional":
            ref = round(ref * patches_per_modality[0] / REFERENCE_PATCHES)
        if ref > sum(patches_per_modality):
            raise CapacityError(f"budget {ref} exceeds {sum(patches_per_modality)} available patches")
        return int(ref)


@dataclass(frozen=True)
class TokenAllocation:
    """Visible-patch indices per modality (sorted, unique)."""

    counts: tuple[int, ...]
    indices: tuple[np.ndarray, ...]

    @property
    def budget(self) -> int:
        return int(sum(self.counts))

    def visible_mask(self, m: int, num_patches: int) -> np.ndarray:
        out = np.zeros(num_patches, dtype=bool)
        out[self.indices[m]] = True
        return out

    def masked_indices(self, m: int, num_patches: int) -> np.ndarray:
        return np.flatnonzero(~self.visible_mask(m, num_patches))

    @classmethod
    def from_indices(cls, indices: Sequence[Sequence[int]]) -> "TokenAllocation":
        arrs = tuple(np.unique(np.asarray(ix, dtype=np.int64)) for ix in indices)
        for a, ix in zip(arrs, indices):
            if len(a) != len(ix):
                raise CapacityError("duplicate patch index in allocation")
        return cls(counts=tuple(len(a) for a in arrs), indices=arrs)

    @classmethod
    def full(cls, patches_per_modality: Sequence[int]) -> "TokenAllocation":
        return cls.from_indices([np.arange(p) for p in patches_per_modality])


def _gamma(shape: float, rng: np.random.Generator) -> float:
    """One Gamma(shape, 1) draw (Marsaglia-Tsang; boosted for shape < 1)."""
    if shape < 1.0:
        u = rng.random()
        # G(a) = G(a + 1) * U^(1/a); done in log space to survive tiny shapes
        return math.exp(math.log(_gamma(shape + 1.0, rng)) + math.log(u) / shape) if u > 0 else 0.0
    d = shape - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    while True:
        x = rng.standard_normal()
        v = 1.0 + c * x
        if v <= 0:
            continue
        v = v * v * v
        u = rng.random()
        if u < 1.0 - 0.0331 * x ** 4:
            return d * v
        if math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
            return d * v


def sample_shares(alpha: float, m: int, rng: np.random.Generator) -> np.ndarray:
    """Draw modality shares from a symmetric Dirichlet(alpha) over ``m`` modalities."""
    if not alpha > 0:
        raise ConfigError(f"alpha must be > 0, got {alpha}")
    if m < 1:
        raise ConfigError(f"need at least one modality, got {m}")
    if m == 1:
        return np.ones(1)
    g = np.array([_gamma(alpha, rng) for _ in range(m)])
    total = g.sum()
    if total <= 0:
        # every gamma underflowed (alpha very small): the draw sits on a vertex
        g = np.zeros(m)
        g[int(rng.integers(m))] = 1.0
        total = 1.0
    shares = g / total
    shares[-1] = 1.0 - shares[:-1].sum()
    return np.clip(shares, 0.0, 1.0)


def allocate_budget(shares: Sequence[float], budget: int,
                    capacity: Sequence[int] | None = None) -> np.ndarray:
    """Integer counts summing to ``budget`` by the largest-remainder rule.

    Counts above a modality's ``capacity`` spill to the modality with the next
    largest remainder that still has room.
    """
    shares = np.asarray(shares, dtype=np.float64)
    m = len(shares)
    cap = np.full(m, budget, dtype=np.int64) if capacity is None else np.asarray(capacity, dtype=np.int64)
    if budget < 0:
        raise CapacityError(f"budget must be nonnegative, got {budget}")
    if budget > cap.sum():
        raise CapacityError(f"budget {budget} exceeds total capacity {int(cap.sum())}")
    raw = shares * budget
    counts = np.minimum(np.floor(raw + 1e-12).astype(np.int64), cap)
    remainder = raw - counts
    # stable order: larger remainder first, then lower modality index
    order = sorted(range(m), key=lambda i: (-remainder[i], i))
    left = budget - int(counts.sum())
    while left > 0:
        for i in order:
            if left == 0:
                break
            if counts[i] < cap[i]:
                counts[i] += 1
                left -= 1
    return counts


def select_tokens(counts: Sequence[int], patches_per_modality: Sequence[int],
                  rng: np.random.Generator) -> TokenAllocation:
    """Uniformly random visible subsets of the requested sizes."""
    if len(counts) != len(patches_per_modality):
        raise CapacityError("counts and patches_per_modality differ in length")
    indices = []
    for c, p in zip(counts, patches_per_modality):
        if c < 0 or c > p:
            raise CapacityError(f"cannot select {c} of {p} patches")
        indices.append(np.sort(rng.choice(p, size=int(c), replace=False)).astype(np.int64))
    return TokenAllocation(counts=tuple(int(c) for c in counts), indices=tuple(indices))


def sample_allocation(cfg: MaskingConfig, patches_per_modality: Sequence[int],
                      rng: np.random.Generator) -> TokenAllocation:
    budget = cfg.budget(patches_per_modality)
    shares = sample_shares(cfg.alpha, len(patches_per_modality), rng)
    counts = allocate_budget(shares, budget, patches_per_modality)
    return select_tokens(counts, patches_per_modality, rng)
