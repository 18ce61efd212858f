"""Random patch masks and hard/soft replacement with a learned mask token."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class PatchMask:
    grid: np.ndarray  # bool, length (canvas/patch)**2, row-major
    ratio: float
    patch_size: int = 16

    def __post_init__(self):
        if self.grid.dtype != bool or self.grid.ndim != 1:
            raise ValueError("grid must be a 1-D boolean array")

    def __len__(self) -> int:
        return len(self.grid)

    @property
    def count(self) -> int:
        return int(self.grid.sum())

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.grid.copy())


def num_masked(num_patches: int, ratio: float) -> int:
    return int(round(ratio * num_patches))


def sample_mask(num_patches: int, ratio: float, rng: np.random.Generator, patch_size: int = 16) -> PatchMask:
    """Mask exactly round(ratio * num_patches) positions, uniformly over the whole grid."""
    if not 0 <= ratio <= 1:
        raise ValueError(f"ratio must be in [0, 1], got {ratio}")
    grid = np.zeros(num_patches, dtype=bool)
    k = num_masked(num_patches, ratio)
    if k:
        grid[rng.choice(num_patches, size=k, replace=False)] = True
    return PatchMask(grid, float(ratio), patch_size)


def _as_bool(mask, n: int) -> torch.Tensor:
    m = mask.tensor() if isinstance(mask, PatchMask) else torch.as_tensor(mask, dtype=torch.bool)
    if m.shape[-1] != n:
        raise ValueError(f"mask covers {m.shape[-1]} positions but there are {n} embeddings")
    return m


def apply_hard_mask(embeddings: torch.Tensor, mask, token: torch.Tensor) -> torch.Tensor:
    """Replace masked positions of (..., N, D) embeddings by ``token`` (D,)."""
    m = _as_bool(mask, embeddings.shape[-2]).to(embeddings.device)
    return torch.where(m.unsqueeze(-1), token.to(embeddings.dtype).expand_as(embeddings), embeddings)


def apply_soft_mask(embeddings: torch.Tensor, mask, token: torch.Tensor, y: float = 60.0) -> torch.Tensor:
    """Masked positions become ``y/100 * token + (1 - y/100) * embedding``."""
    if not 0 <= y <= 100:
        raise ValueError(f"y must be in [0, 100], got {y}")
    m = _as_bool(mask, embeddings.shape[-2]).to(embeddings.device)
    w = y / 100.0
    blended = w * token.to(embeddings.dtype) + (1.0 - w) * embeddings
    return torch.where(m.unsqueeze(-1), blended, embeddings)
