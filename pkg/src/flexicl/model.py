"""SimMIM-style ViT: patch embedding, transformer encoder, one-conv pixel head."""
from __future__ import annotations

import io
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .masking import apply_hard_mask, apply_soft_mask

CHECKPOINT_SCHEMA = 1


@dataclass
class ModelConfig:
    canvas_size: int = 224
    patch_size: int = 16
    embed_dim: int = 768
    depth: int = 12
    num_heads: int = 12
    channels: int = 1
    mlp_ratio: float = 4.0
    pos_init: str = "sincos"

    def __post_init__(self):
        if self.canvas_size % self.patch_size:
            raise ValueError("patch_size: must divide canvas_size")
        if self.embed_dim % self.num_heads:
            raise ValueError("num_heads: must divide embed_dim")
        if self.channels != 1:
            raise ValueError("channels: only single-channel canvases are supported")
        if self.pos_init not in ("sincos", "random"):
            raise ValueError("pos_init: must be 'sincos' or 'random'")
        if self.canvas_size % 2:
            raise ValueError("canvas_size: must be even (2x2 cells)")

    @classmethod
    def toy(cls) -> "ModelConfig":
        return cls(canvas_size=64, patch_size=8, embed_dim=128, depth=4, num_heads=4)

    @property
    def grid(self) -> int:
        return self.canvas_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def cell_size(self) -> int:
        return self.canvas_size // 2

    def to_dict(self) -> dict:
        return asdict(self)


def sincos_2d(dim: int, grid: int) -> np.ndarray:
    """(grid*grid, dim) table: half the channels encode the row, half the column."""
    if dim % 4:
        raise ValueError("embed_dim must be divisible by 4 for sin-cos init")
    omega = 1.0 / 10000 ** (np.arange(dim // 4, dtype=np.float64) / (dim / 4.0))
    rows, cols = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")

    def enc(pos):
        out = np.outer(pos.ravel(), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    return np.concatenate([enc(rows), enc(cols)], axis=1)


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, N, D = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.num_heads, D // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q @ k.transpose(-2, -1)) * (q.shape[-1] ** -0.5)
        x = attn.softmax(dim=-1) @ v
        return self.proj(x.transpose(1, 2).reshape(B, N, D))


class Block(nn.Module):
    """Pre-norm transformer block with a GELU MLP."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class FlexICLModel(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config = config or ModelConfig()
        D, p = config.embed_dim, config.patch_size
        self.proj = nn.Conv2d(config.channels, D, kernel_size=p, stride=p)
        self.pos_embed = nn.Parameter(torch.zeros(1, config.num_patches, D))
        self.mask_token = nn.Parameter(torch.zeros(D))
        self.blocks = nn.ModuleList([Block(D, config.num_heads, config.mlp_ratio) for _ in range(config.depth)])
        self.norm = nn.LayerNorm(D, eps=1e-6)
        # the whole decoder: 1x1 conv to p*p pixels per patch, then pixel shuffle
        self.decoder = nn.Conv2d(D, p * p * config.channels, kernel_size=1)
        self._init_weights()

    def _init_weights(self):
        if self.config.pos_init == "sincos":
            table = sincos_2d(self.config.embed_dim, self.config.grid)
            self.pos_embed.data.copy_(torch.from_numpy(table).float()[None])
        else:
            nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        w = self.proj.weight.data
        nn.init.xavier_uniform_(w.view(w.shape[0], -1))
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def _check(self, canvas: torch.Tensor) -> torch.Tensor:
        if canvas.dim() == 2:
            canvas = canvas[None, None]
        elif canvas.dim() == 3:
            canvas = canvas[:, None]
        s = self.config.canvas_size
        if canvas.shape[1:] != (self.config.channels, s, s):
            raise ValueError(f"expected canvas of size {s}x{s}, got {tuple(canvas.shape)}")
        return canvas

    def project(self, canvas: torch.Tensor) -> torch.Tensor:
        """(B, 1, S, S) -> (B, N, D) patch projections in row-major order."""
        return self.proj(self._check(canvas)).flatten(2).transpose(1, 2)

    def patch_embed(self, canvas: torch.Tensor) -> torch.Tensor:
        return self.project(canvas) + self.pos_embed

    def encode(self, tokens: torch.Tensor) -> torch.Tensor:
        x = tokens + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def decode(self, feats: torch.Tensor) -> torch.Tensor:
        B, N, D = feats.shape
        g = self.config.grid
        x = self.decoder(feats.transpose(1, 2).reshape(B, D, g, g))
        return F.pixel_shuffle(x, self.config.patch_size)

    def forward(self, canvas: torch.Tensor, mask=None, mode: str = "hard", soft_y: float = 60.0) -> torch.Tensor:
        """Reconstruct the full canvas; ``mask`` is a (B, N) or (N,) bool grid or None."""
        canvas = self._check(canvas)
        tokens = self.project(canvas)
        if mask is not None:
            if mode == "hard":
                tokens = apply_hard_mask(tokens, mask, self.mask_token)
            elif mode == "soft":
                tokens = apply_soft_mask(tokens, mask, self.mask_token, soft_y)
            else:
                raise ValueError(f"unknown mask mode {mode!r}")
        return self.decode(self.encode(tokens))


def pixel_mask(mask: torch.Tensor, config: ModelConfig) -> torch.Tensor:
    """Expand a (B, N) patch grid to a (B, 1, S, S) pixel indicator."""
    m = torch.as_tensor(mask)
    if m.dim() == 1:
        m = m[None]
    g, p = config.grid, config.patch_size
    return m.reshape(-1, 1, g, g).repeat_interleave(p, 2).repeat_interleave(p, 3)


def reconstruction_loss(prediction: torch.Tensor, target: torch.Tensor, mask, config: ModelConfig) -> torch.Tensor:
    """Mean absolute error over pixels inside masked patches (0 when nothing is masked)."""
    if prediction.shape != target.shape:
        raise ValueError(f"prediction {tuple(prediction.shape)} and target {tuple(target.shape)} differ")
    w = pixel_mask(mask, config).to(prediction.dtype).reshape(prediction.shape[0], *prediction.shape[1:])
    total = w.sum()
    if total == 0:
        return (prediction * 0).sum()
    return ((prediction - target).abs() * w).sum() / total


def count_parameters(module: nn.Module, encoder_only: bool = False) -> int:
    skip = ("decoder.",) if encoder_only else ()
    return sum(p.numel() for n, p in module.named_parameters() if not n.startswith(skip))


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | Path, model: nn.Module, optimizer=None, epoch: int = 0, extra: dict | None = None) -> Path:
    """Atomically write a self-describing checkpoint archive."""
    path = Path(path)
    state = {
        "schema_version": CHECKPOINT_SCHEMA,
        "kind": getattr(model, "kind", "flexicl"),
        "config": model.config.to_dict(),
        "params": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "rng": {"torch": torch.get_rng_state(), "numpy": np.random.get_state()},
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(state, buf)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path: str | Path) -> tuple["FlexICLModel", dict]:
    state = torch.load(path, map_location="cpu", weights_only=False)
    if state.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ValueError(f"{path}: unsupported checkpoint schema {state.get('schema_version')}")
    model = FlexICLModel(ModelConfig(**state["config"]))
    model.load_state_dict(state["params"])
    model.kind = state.get("kind", "flexicl")
    model.eval()
    return model, state
