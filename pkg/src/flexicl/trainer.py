"""FlexICL training loop and the no-context supervised ViT-CNN baseline."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .composer import (
    AugmentationConfig,
    SupportQueryPair,
    combine_seed,
    compose_canvas,
    imagewise_augment,
    pairwise_expand,
)
from .dataset import SplitManifest, VideoSweep, preprocess
from .masking import sample_mask
from .model import FlexICLModel, ModelConfig, count_parameters, reconstruction_loss, save_checkpoint

log = logging.getLogger(__name__)

NO_DECAY_DEFAULT = ("bias", "norm", "pos_embed", "mask_token")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.0005
    weight_decay: float = 0.05
    epochs: int = 1200
    batch_size: int = 64
    mask_ratio: float = 0.6
    mask_mode: str = "hard"
    soft_y: float = 60.0
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    base_seed: int = 0
    checkpoint_every: int = 0
    lr_schedule: str = "constant"
    warmup_epochs: int = 0
    cross_video: bool = False
    no_decay: tuple[str, ...] = NO_DECAY_DEFAULT
    strict_determinism: bool = False

    def __post_init__(self):
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationConfig(**self.augmentation)
        self.no_decay = tuple(self.no_decay)
        if self.learning_rate <= 0:
            raise ValueError("learning_rate: must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay: must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs: must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size: must be >= 1")
        if not 0 <= self.mask_ratio <= 1:
            raise ValueError("mask_ratio: must be in [0, 1]")
        if self.mask_mode not in ("hard", "soft"):
            raise ValueError("mask_mode: must be 'hard' or 'soft'")
        if not 0 <= self.soft_y <= 100:
            raise ValueError("soft_y: must be in [0, 100]")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule: must be 'constant' or 'cosine'")
        if self.checkpoint_every < 0 or self.warmup_epochs < 0:
            raise ValueError("checkpoint_every/warmup_epochs: must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["no_decay"] = list(self.no_decay)
        return d


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    wall_time: float
    samples: int
    steps: int
    stream: list[int]  # RNG stream id prefix; sample i uses stream + [i]
    val_loss: float | None = None


class TrainingLog:
    def __init__(self, records: list[EpochRecord] | None = None, meta: dict | None = None):
        self.records = records or []
        self.meta = meta or {}

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epoch numbering must increase")
        self.records.append(rec)

    @property
    def losses(self) -> list[float]:
        return [r.mean_loss for r in self.records]

    def to_jsonl(self) -> str:
        lines = [json.dumps({"meta": self.meta})] if self.meta else []
        lines += [json.dumps(asdict(r)) for r in self.records]
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_jsonl())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "TrainingLog":
        out = cls()
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            if "meta" in d:
                out.meta = d["meta"]
            else:
                out.records.append(EpochRecord(**d))
        return out


@dataclass
class Checkpoint:
    model: FlexICLModel
    optimizer_state: dict | None = None
    epoch: int = 0
    train_config: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(path, self.model, _StateHolder(self.optimizer_state), self.epoch, {"train_config": self.train_config})


class _StateHolder:
    def __init__(self, state):
        self.state = state

    def state_dict(self):
        return self.state


# --------------------------------------------------------------------------- helpers


def seed_everything(seed: int, strict: bool = False) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    if strict:
        torch.use_deterministic_algorithms(True)


def param_groups(model: torch.nn.Module, weight_decay: float, no_decay: Sequence[str]):
    """Split parameters into decayed / non-decayed groups by name substring."""
    decay, skip, skipped = [], [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if p.ndim <= 1 or any(key in name for key in no_decay):
            skip.append(p)
            skipped.append(name)
        else:
            decay.append(p)
    groups = [{"params": decay, "weight_decay": weight_decay}, {"params": skip, "weight_decay": 0.0}]
    return groups, skipped


def lr_at(config: TrainConfig, epoch: int) -> float:
    if config.warmup_epochs and epoch < config.warmup_epochs:
        return config.learning_rate * (epoch + 1) / config.warmup_epochs
    if config.lr_schedule == "cosine":
        t = (epoch - config.warmup_epochs) / max(1, config.epochs - config.warmup_epochs)
        return config.learning_rate * 0.5 * (1 + math.cos(math.pi * t))
    return config.learning_rate


def prepare_frames(corpus: Sequence[VideoSweep], keys, size: int) -> dict:
    """Pad/resize the frames named by (video_id, frame_index) keys to ``size``."""
    by_id = {v.video_id: v for v in corpus}
    out = {}
    for vid, idx in keys:
        f = by_id[vid].frame(idx)
        img, msk, _ = preprocess(f.image, f.mask, size)
        out[(vid, idx)] = (img.astype(np.float32), msk.astype(np.float32))
    return out


def _check_split(corpus, split: SplitManifest) -> None:
    split.validate(corpus)
    for vid, s in split.videos.items():
        if not s.support_indices or not s.query_indices:
            raise ValueError(f"{vid}: support and query pools must be non-empty")


def epoch_pairs(split: SplitManifest, epoch: int, config: TrainConfig) -> list[tuple[str, int, SupportQueryPair]]:
    """All (video_id, pair_index, pair) for one epoch in deterministic batch order.

    Pool members are (video_id, frame_index) keys. Pairings are re-drawn every
    epoch when epochwise augmentation is on, otherwise fixed for the whole run.
    """
    aug = config.augmentation
    vids = sorted(split.videos)
    out = []
    if config.cross_video:
        sup = [(v, i) for v in vids for i in split.videos[v].support_indices]
        qry = [(v, i) for v in vids for i in split.videos[v].query_indices]
        seed = combine_seed(config.base_seed, epoch, 1 << 20) if aug.epochwise else combine_seed(config.base_seed, 1 << 20)
        pairs = pairwise_expand(sup, qry, aug.pairwise_n, seed)
        out = [(p.query[0], k, p) for k, p in enumerate(pairs)]
        return sorted(out, key=lambda t: (t[0], t[1]))
    for ordinal, vid in enumerate(vids):
        s = split.videos[vid]
        seed = combine_seed(config.base_seed, epoch, ordinal) if aug.epochwise else combine_seed(config.base_seed, ordinal)
        pairs = pairwise_expand(
            [(vid, i) for i in s.support_indices], [(vid, i) for i in s.query_indices], aug.pairwise_n, seed
        )
        out.extend((vid, k, p) for k, p in enumerate(pairs))
    return out


def build_sample(
    frames: dict,
    pair: SupportQueryPair,
    config: TrainConfig,
    model_config: ModelConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Augment both sides, compose the canvas with the true query mask, draw a patch mask."""
    aug = config.augmentation
    s_img, s_msk = imagewise_augment(*frames[pair.support], aug, rng)
    q_img, q_msk = imagewise_augment(*frames[pair.query], aug, rng)
    canvas = compose_canvas(s_img, s_msk, q_img, q_msk, model_config.cell_size)
    mask = sample_mask(model_config.num_patches, config.mask_ratio, rng, model_config.patch_size)
    return canvas.pixels.astype(np.float32), mask.grid


def sample_stream(config: TrainConfig, epoch: int, i: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([config.base_seed, epoch, i, 7]))


# --------------------------------------------------------------------------- training


def train(
    corpus: Sequence[VideoSweep],
    split: SplitManifest,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir: str | Path | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
    dump_canvas: str | Path | None = None,
) -> tuple[Checkpoint, TrainingLog]:
    """Train FlexICL from scratch; fully determined by (corpus, split, configs)."""
    _check_split(corpus, split)
    cfg = train_config
    seed_everything(cfg.base_seed, cfg.strict_determinism)
    model = FlexICLModel(model_config)
    groups, skipped = param_groups(model, cfg.weight_decay, cfg.no_decay)
    opt = torch.optim.AdamW(groups, lr=cfg.learning_rate, betas=(0.9, 0.999))
    keys = {(v, i) for v, s in split.videos.items() for i in s.train_indices}
    frames = prepare_frames(corpus, sorted(keys), model_config.cell_size)
    tlog = TrainingLog(
        meta={
            "kind": "flexicl",
            "model_config": model_config.to_dict(),
            "train_config": cfg.to_dict(),
            "no_decay_params": skipped,
            "num_parameters": count_parameters(model),
        }
    )
    out_dir = Path(out_dir) if out_dir is not None else None
    dumped = False
    model.train()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(cfg, epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        stream = epoch_pairs(split, epoch, cfg)
        total, count, steps = 0.0, 0, 0
        for start in range(0, len(stream), cfg.batch_size):
            chunk = stream[start : start + cfg.batch_size]
            canv, masks = zip(
                *(build_sample(frames, p, cfg, model_config, sample_stream(cfg, epoch, start + j)) for j, (_, _, p) in enumerate(chunk))
            )
            x = torch.from_numpy(np.stack(canv))[:, None]
            m = torch.from_numpy(np.stack(masks))
            if dump_canvas is not None and not dumped:
                _dump_canvases(dump_canvas, x, m, model_config)
                dumped = True
            pred = model(x, m, cfg.mask_mode, cfg.soft_y)
            loss = reconstruction_loss(pred, x, m, model_config)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {steps}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(chunk)
            count += len(chunk)
            steps += 1
        rec = EpochRecord(epoch, total / count, time.perf_counter() - t0, count, steps, [cfg.base_seed, epoch])
        tlog.append(rec)
        if on_epoch:
            on_epoch(rec)
        log.debug("epoch %d loss %.5f", epoch, rec.mean_loss)
        if out_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            Checkpoint(model, opt.state_dict(), epoch + 1, cfg.to_dict()).save(out_dir / f"checkpoint_{epoch + 1:05d}.pt")
    model.eval()
    ckpt = Checkpoint(model, opt.state_dict(), cfg.epochs, cfg.to_dict())
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt.save(out_dir / "checkpoint.pt")
        tlog.save(out_dir / "train_log.jsonl")
    return ckpt, tlog


def _dump_canvases(out: str | Path, x: torch.Tensor, m: torch.Tensor, mc: ModelConfig, limit: int = 8) -> None:
    from .dataset import image_to_u8, write_png
    from .model import pixel_mask

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    pm = pixel_mask(m, mc).numpy()
    for i in range(min(limit, len(x))):
        img = x[i, 0].numpy()
        write_png(out / f"canvas_{i:02d}.png", image_to_u8(img))
        write_png(out / f"canvas_{i:02d}_masked.png", image_to_u8(np.where(pm[i, 0], 0.5, img)))


# --------------------------------------------------------------------------- baseline


def baseline_split(split: SplitManifest, seed: int, val_fraction: float = 0.2) -> tuple[list, list]:
    """80/20 train/validation split of every video's labelled frames (seeded)."""
    train_keys, val_keys = [], []
    for ordinal, vid in enumerate(sorted(split.videos)):
        idx = list(split.videos[vid].train_indices)
        rng = np.random.default_rng(combine_seed(seed, ordinal, 99))
        order = rng.permutation(len(idx))
        n_val = int(round(val_fraction * len(idx))) if len(idx) > 1 else 0
        val_keys += [(vid, idx[i]) for i in sorted(order[:n_val])]
        train_keys += [(vid, idx[i]) for i in sorted(order[n_val:])]
    return train_keys, val_keys


def train_supervised_baseline(
    corpus: Sequence[VideoSweep],
    split: SplitManifest,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir: str | Path | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[Checkpoint, TrainingLog]:
    """Same ViT + one-conv head fed a single query image; target is its mask.

    No canvas, no masking, L1 over all pixels. Keeps the weights with the best
    validation loss.
    """
    _check_split(corpus, split)
    cfg = train_config
    seed_everything(cfg.base_seed, cfg.strict_determinism)
    model = FlexICLModel(model_config)
    model.kind = "baseline"
    groups, skipped = param_groups(model, cfg.weight_decay, cfg.no_decay)
    opt = torch.optim.AdamW(groups, lr=cfg.learning_rate)
    train_keys, val_keys = baseline_split(split, cfg.base_seed)
    size = model_config.canvas_size
    frames = prepare_frames(corpus, train_keys + val_keys, size)
    full = torch.ones(model_config.num_patches, dtype=torch.bool)
    tlog = TrainingLog(
        meta={
            "kind": "baseline",
            "model_config": model_config.to_dict(),
            "train_config": cfg.to_dict(),
            "no_decay_params": skipped,
            "train_frames": len(train_keys),
            "val_frames": len(val_keys),
        }
    )
    if val_keys:
        vx = torch.from_numpy(np.stack([frames[k][0] for k in val_keys]))[:, None]
        vy = torch.from_numpy(np.stack([frames[k][1] for k in val_keys]))[:, None]
    best, best_state = math.inf, None
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        model.train()
        for g in opt.param_groups:
            g["lr"] = lr_at(cfg, epoch)
        total, steps = 0.0, 0
        for start in range(0, len(train_keys), cfg.batch_size):
            chunk = train_keys[start : start + cfg.batch_size]
            xs, ys = [], []
            for j, key in enumerate(chunk):
                rng = sample_stream(cfg, epoch, start + j)
                img, msk = imagewise_augment(*frames[key], cfg.augmentation, rng)
                xs.append(img)
                ys.append(msk)
            x = torch.from_numpy(np.stack(xs).astype(np.float32))[:, None]
            y = torch.from_numpy(np.stack(ys).astype(np.float32))[:, None]
            pred = model(x)
            loss = reconstruction_loss(pred, y, full.expand(len(chunk), -1), model_config)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {steps}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(chunk)
            steps += 1
        val = None
        if val_keys:
            model.eval()
            with torch.no_grad():
                val = float((model(vx) - vy).abs().mean())
            if val < best:
                best = val
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        rec = EpochRecord(epoch, total / len(train_keys), time.perf_counter() - t0, len(train_keys), steps, [cfg.base_seed, epoch], val)
        tlog.append(rec)
        if on_epoch:
            on_epoch(rec)
    if best_state is not None:
        model.load_state_dict(best_state)
        tlog.meta["best_val_loss"] = best
    model.eval()
    ckpt = Checkpoint(model, opt.state_dict(), cfg.epochs, cfg.to_dict())
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt.save(out_dir / "checkpoint.pt")
        tlog.save(out_dir / "train_log.jsonl")
    return ckpt, tlog


def predict_baseline(model: FlexICLModel, image: np.ndarray) -> np.ndarray:
    """Raw baseline output for a square image already at canvas size."""
    with torch.no_grad():
        x = torch.from_numpy(np.asarray(image, np.float32))[None, None]
        return model(x)[0, 0].numpy()
