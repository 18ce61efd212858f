"""Support-query pairing, imagewise augmentation and 2x2 canvas composition.

Canvas layout (cell size C, canvas 2C x 2C)::

    +-----------------+-----------------+
    | support image   | support mask    |
    +-----------------+-----------------+
    | query image     | query mask / 0  |
    +-----------------+-----------------+
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Hashable, Sequence

import numpy as np

from .dataset import resize


@dataclass(frozen=True)
class SupportQueryPair:
    support: Hashable
    query: Hashable
    round: int


@dataclass
class AugmentationConfig:
    pairwise_n: int = 5
    imagewise_ratio: float = 0.5
    crop_min_frac: float = 150 / 224
    flip_enabled: bool = True
    crop_enabled: bool = True
    epochwise: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.pairwise_n < 1:
            raise ValueError("pairwise_n: must be >= 1")
        if not 0 <= self.imagewise_ratio <= 1:
            raise ValueError("imagewise_ratio: must be in [0, 1]")
        if not 0 < self.crop_min_frac <= 1:
            raise ValueError("crop_min_frac: must be in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def combine_seed(*parts: int) -> int:
    """Derive an independent 63-bit seed from integer parts (base seed, epoch, ...)."""
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts]).generate_state(2, np.uint64)[0] >> np.uint64(1))


def pairwise_expand(support_pool: Sequence, query_pool: Sequence, n: int, seed: int) -> list[SupportQueryPair]:
    """Pair every query with a support frame, ``n`` times over.

    Each round draws a fresh permutation of the support pool and walks it
    cyclically alongside the query pool, so output length is ``n * len(query_pool)``.
    """
    if len(support_pool) == 0 or len(query_pool) == 0:
        raise ValueError("support and query pools must be non-empty")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    pairs = []
    for r in range(1, n + 1):
        perm = rng.permutation(len(support_pool))
        for j, q in enumerate(query_pool):
            pairs.append(SupportQueryPair(support_pool[perm[j % len(perm)]], q, r))
    return pairs


def epoch_shuffle(support_pool: Sequence, query_pool: Sequence, epoch: int, base_seed: int) -> list[SupportQueryPair]:
    return pairwise_expand(support_pool, query_pool, 1, combine_seed(base_seed, epoch))


# --------------------------------------------------------------------------- imagewise


@dataclass(frozen=True)
class Geometry:
    """A concrete flip/crop draw; ``side == size`` with top/left 0 is no crop."""

    flip: bool
    top: int
    left: int
    side: int


def apply_geometry(arr: np.ndarray, geom: Geometry, kind: str) -> np.ndarray:
    size = arr.shape[0]
    out = arr[:, ::-1] if geom.flip else arr
    out = out[geom.top : geom.top + geom.side, geom.left : geom.left + geom.side]
    return resize(np.ascontiguousarray(out), size, kind)


def draw_geometry(size: int, config: AugmentationConfig, rng: np.random.Generator) -> Geometry:
    flip = bool(config.flip_enabled and rng.random() < 0.5)
    if config.crop_enabled:
        side = int(rng.integers(math.ceil(config.crop_min_frac * size), size + 1))
        top = int(rng.integers(0, size - side + 1))
        left = int(rng.integers(0, size - side + 1))
    else:
        side, top, left = size, 0, 0
    return Geometry(flip, top, left, side)


def imagewise_augment(
    image: np.ndarray,
    mask: np.ndarray,
    config: AugmentationConfig,
    rng: np.random.Generator,
    return_geometry: bool = False,
):
    """With probability ``config.imagewise_ratio`` flip and/or crop-resize the pair.

    The image and its mask always receive the same geometric transform. When
    ``return_geometry`` is set the drawn :class:`Geometry` (or None) is returned too.
    """
    if image.shape != mask.shape or image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ValueError(f"expected equal square image/mask, got {image.shape} and {mask.shape}")
    geom = None
    if config.imagewise_ratio > 0 and rng.random() < config.imagewise_ratio:
        geom = draw_geometry(image.shape[0], config, rng)
        image = apply_geometry(image, geom, "image")
        mask = apply_geometry(mask, geom, "mask")
    if return_geometry:
        return image, mask, geom
    return image, mask


# --------------------------------------------------------------------------- canvas


@dataclass(frozen=True)
class Canvas:
    pixels: np.ndarray
    cell_size: int

    def quadrant(self, name: str) -> np.ndarray:
        c = self.cell_size
        r, col = {"tl": (0, 0), "tr": (0, 1), "bl": (1, 0), "br": (1, 1)}[name]
        return self.pixels[r * c : (r + 1) * c, col * c : (col + 1) * c]


def compose_canvas(support_img, support_mask, query_img, query_mask_or_blank, C: int) -> Canvas:
    parts = [support_img, support_mask, query_img, query_mask_or_blank]
    if query_mask_or_blank is None:
        parts[3] = np.zeros((C, C), dtype=np.asarray(support_img).dtype)
    for p in parts:
        if np.shape(p) != (C, C):
            raise ValueError(f"canvas cells must be {C}x{C}, got {np.shape(p)}")
    dtype = np.result_type(*parts, np.float32)
    top = np.concatenate([np.asarray(parts[0], dtype), np.asarray(parts[1], dtype)], axis=1)
    bottom = np.concatenate([np.asarray(parts[2], dtype), np.asarray(parts[3], dtype)], axis=1)
    return Canvas(np.concatenate([top, bottom], axis=0), C)


def extract_query_output(canvas_pixels, C: int):
    """Bottom-right quadrant of a 2C x 2C canvas (works on arrays and tensors, leading dims allowed)."""
    if tuple(canvas_pixels.shape[-2:]) != (2 * C, 2 * C):
        raise ValueError(f"canvas must be {2 * C}x{2 * C}, got {tuple(canvas_pixels.shape[-2:])}")
    return canvas_pixels[..., C:, C:]
