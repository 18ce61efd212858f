"""Deterministic ultrasound-like sweeps: speckled background with one bright curved band.

Frame model (per video, frame t, column x)::

    center(x, t) = y0 + A * sin(2*pi*drift*t / (2*pi*A) + phi) + curv * sin(pi*x/W + omega*t + psi)

The band is ``thickness`` pixels tall around ``center``; below it the image is
shadowed. Vertical displacement between consecutive frames is at most
``drift + curv * omega`` at every column, and construction rejects configs where
that exceeds a third of the thinnest band (which keeps consecutive-mask IoU >= 0.5).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dataset import Frame, VideoSweep, image_to_u8, write_manifest, write_png


@dataclass
class SynthConfig:
    num_videos: int = 10
    frames_per_video: int = 100
    height: int = 64
    width: int = 64
    thickness_min: float = 7.0
    thickness_max: float = 12.0
    curvature: float = 5.0
    undulation: float = 0.04  # rad/frame of the curvature phase
    drift: float = 0.6  # peak px/frame of the vertical sweep motion
    speckle_sigma: float = 0.35
    band_intensity: float = 0.85
    background_intensity: float = 0.25
    clutter_count: int = 0  # echogenic soft-tissue blobs above the bone (not in the mask)
    clutter_intensity: float = 0.85
    seed: int = 0

    def __post_init__(self):
        if self.num_videos < 0 or self.frames_per_video < 1:
            raise ValueError("num_videos/frames_per_video: must be positive")
        if self.height < 8 or self.width < 8:
            raise ValueError("height/width: frames must be at least 8x8")
        if not 0 < self.thickness_min <= self.thickness_max:
            raise ValueError("thickness_min: must satisfy 0 < thickness_min <= thickness_max")
        if self.thickness_max > 0.35 * self.height:
            raise ValueError("thickness_max: band too thick for the frame")
        if self.max_step > self.thickness_min / 3:
            raise ValueError(
                f"drift: per-frame displacement bound {self.max_step:.3f}px exceeds "
                f"thickness_min/3 = {self.thickness_min / 3:.3f}px (consecutive masks would overlap < 0.5 IoU)"
            )
        if self.speckle_sigma < 0:
            raise ValueError("speckle_sigma: must be >= 0")
        if self.clutter_count < 0:
            raise ValueError("clutter_count: must be >= 0")

    @property
    def max_step(self) -> float:
        return self.drift + self.curvature * abs(self.undulation)

    def to_dict(self) -> dict:
        return asdict(self)


def _band_rows(config: SynthConfig, params: dict, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Upper and lower band edges per column (float pixel coordinates)."""
    x = np.arange(config.width) + 0.5
    amp = params["sweep_amp"]
    phase = config.drift * t / amp + params["phi"] if amp > 0 else params["phi"]
    center = (
        params["y0"]
        + amp * np.sin(phase)
        + config.curvature * np.sin(np.pi * x / config.width + config.undulation * t + params["psi"])
    )
    half = params["thickness"] / 2
    return center - half, center + half


def _video_params(config: SynthConfig, rng: np.random.Generator) -> dict:
    thickness = rng.uniform(config.thickness_min, config.thickness_max)
    margin = config.curvature + thickness / 2 + 2
    span = max(config.height - 2 * margin, 0.0)
    sweep_amp = min(0.15 * config.height, span / 2)
    y0 = rng.uniform(margin + sweep_amp, config.height - margin - sweep_amp) if span > 2 * sweep_amp else config.height / 2
    clutter = [
        {
            "x": rng.uniform(0.1, 0.9) * config.width,
            "gap": rng.uniform(0.4, 1.0),  # fraction of the free space above the band
            "half_len": rng.uniform(0.08, 0.18) * config.width,
            "half_thick": rng.uniform(0.3, 0.5) * thickness,
        }
        for _ in range(config.clutter_count)
    ]
    return {
        "thickness": thickness,
        "y0": y0,
        "sweep_amp": sweep_amp,
        "phi": rng.uniform(0, 2 * np.pi),
        "psi": rng.uniform(0, 2 * np.pi),
        "clutter": clutter,
    }


def _clutter(config: SynthConfig, params: dict, top: np.ndarray) -> np.ndarray:
    """Soft-tissue blobs riding above the band; they never touch it."""
    y = np.arange(config.height)[:, None] + 0.5
    x = np.arange(config.width)[None, :] + 0.5
    out = np.zeros((config.height, config.width), bool)
    for c in params.get("clutter", ()):
        col = int(np.clip(c["x"], 0, config.width - 1))
        ceiling = top[col] - c["half_thick"] - 2  # lowest allowed blob center
        if ceiling <= c["half_thick"]:
            continue
        cy = c["half_thick"] + c["gap"] * (ceiling - c["half_thick"])
        blob = ((x - c["x"]) / c["half_len"]) ** 2 + ((y - cy) / c["half_thick"]) ** 2 <= 1
        out |= blob & (y < top[None, :] - 1)
    return out


def render_frame(config: SynthConfig, params: dict, t: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    top, bottom = _band_rows(config, params, t)
    y = np.arange(config.height)[:, None] + 0.5
    mask = ((y >= top) & (y < bottom)).astype(np.uint8)
    depth = np.linspace(1.0, 0.7, config.height)[:, None]
    base = np.full((config.height, config.width), config.background_intensity) * depth
    base = np.where(y >= bottom, base * 0.45, base)  # acoustic shadow under the bone
    base = np.where(_clutter(config, params, top), config.clutter_intensity, base)
    base = np.where(mask == 1, config.band_intensity, base)
    if config.speckle_sigma > 0:
        k = 1.0 / config.speckle_sigma**2
        base = base * rng.gamma(k, 1.0 / k, size=base.shape)
    # quantised to 8-bit levels so PNG storage is lossless
    image = image_to_u8(base).astype(np.float64) / 255.0
    return image, mask


def generate_sweep(config: SynthConfig, video_ordinal: int) -> VideoSweep:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, video_ordinal]))
    params = _video_params(config, rng)
    vid = f"synth{video_ordinal:03d}"
    frames = []
    for t in range(config.frames_per_video):
        image, mask = render_frame(config, params, t, rng)
        frames.append(Frame(vid, t, image, mask))
    return VideoSweep(vid, "synthetic", tuple(frames))


def generate_corpus(config: SynthConfig) -> list[VideoSweep]:
    return [generate_sweep(config, i) for i in range(config.num_videos)]


def write_corpus(config: SynthConfig, out_dir: str | Path) -> Path:
    """Write PNG frames/masks plus ``manifest.json``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(config.num_videos):
        video = generate_sweep(config, i)
        vdir = out_dir / video.video_id
        vdir.mkdir(exist_ok=True)
        frames = []
        for f in video.frames:
            img_rel = f"{video.video_id}/img_{f.frame_index:05d}.png"
            msk_rel = f"{video.video_id}/mask_{f.frame_index:05d}.png"
            try:
                write_png(out_dir / img_rel, image_to_u8(f.image))
                write_png(out_dir / msk_rel, f.mask * 255)
            except OSError as e:
                raise OSError(f"{out_dir / img_rel}: {e}") from e
            frames.append({"frame_index": f.frame_index, "image_path": img_rel, "mask_path": msk_rel})
        entries.append({"video_id": video.video_id, "anatomy": video.anatomy, "frames": frames})
    (out_dir / "synth_config.json").write_text(json.dumps(config.to_dict(), indent=2))
    return write_manifest(entries, out_dir / "manifest.json")
