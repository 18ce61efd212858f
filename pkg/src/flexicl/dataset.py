"""Frame/sweep containers, square padding, resizing and per-video splits."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

ANATOMIES = ("elbow", "wrist", "synthetic")


class CorpusError(ValueError):
    """Raised when a corpus manifest or one of its files is invalid."""


@dataclass(frozen=True)
class Frame:
    video_id: str
    frame_index: int
    image: np.ndarray
    mask: np.ndarray
    original_height: int = -1
    original_width: int = -1

    def __post_init__(self):
        if self.frame_index < 0:
            raise ValueError(f"frame_index must be >= 0, got {self.frame_index}")
        if self.image.ndim != 2 or self.image.shape != self.mask.shape:
            raise ValueError(
                f"image {self.image.shape} and mask {self.mask.shape} must be equal 2-D shapes"
            )
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("mask values must be exactly 0 or 1")
        if self.original_height < 0:
            object.__setattr__(self, "original_height", int(self.image.shape[0]))
        if self.original_width < 0:
            object.__setattr__(self, "original_width", int(self.image.shape[1]))

    @property
    def shape(self) -> tuple[int, int]:
        return self.original_height, self.original_width


@dataclass(frozen=True)
class VideoSweep:
    video_id: str
    anatomy: str
    frames: tuple[Frame, ...]

    def __post_init__(self):
        if self.anatomy not in ANATOMIES:
            raise ValueError(f"unknown anatomy {self.anatomy!r}")
        if not self.frames:
            raise ValueError(f"video {self.video_id!r} has no frames")
        idx = [f.frame_index for f in self.frames]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"frames of {self.video_id!r} must be strictly ordered by frame_index")
        for f in self.frames:
            if f.video_id != self.video_id:
                raise ValueError(f"frame {f.frame_index} belongs to {f.video_id!r}, not {self.video_id!r}")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def frame_indices(self) -> list[int]:
        return [f.frame_index for f in self.frames]

    def frame(self, frame_index: int) -> Frame:
        for f in self.frames:
            if f.frame_index == frame_index:
                return f
        raise KeyError(f"{self.video_id}: no frame {frame_index}")


@dataclass(frozen=True)
class PadRecord:
    pad_top: int
    pad_bottom: int
    pad_left: int
    pad_right: int
    scale_y: float = 1.0
    scale_x: float = 1.0

    def unpad(self, arr: np.ndarray) -> np.ndarray:
        h, w = arr.shape
        return arr[self.pad_top : h - self.pad_bottom, self.pad_left : w - self.pad_right]


def pad_to_square(image: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray, PadRecord]:
    """Zero-pad the shorter axis so the frame is S x S with S = max(H, W).

    Content is centered; when the padding is odd the extra pixel goes to the
    bottom/right.
    """
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape != mask.shape:
        raise ValueError(f"image {image.shape} and mask {mask.shape} differ")
    if image.ndim != 2 or image.size == 0:
        raise ValueError(f"expected a non-empty 2-D image, got shape {image.shape}")
    h, w = image.shape
    s = max(h, w)
    top = (s - h) // 2
    left = (s - w) // 2
    rec = PadRecord(top, s - h - top, left, s - w - left)
    widths = ((rec.pad_top, rec.pad_bottom), (rec.pad_left, rec.pad_right))
    return np.pad(image, widths), np.pad(mask, widths), rec


def resize(image: np.ndarray, target: int | tuple[int, int], kind: str = "image") -> np.ndarray:
    """Resize a 2-D array; bilinear for images, nearest for masks.

    ``target`` is a side length (square output) or an explicit (H, W).
    """
    if isinstance(target, (int, np.integer)):
        target = (int(target), int(target))
    th, tw = target
    if th < 1 or tw < 1:
        raise ValueError(f"target must be >= 1, got {target}")
    if kind not in ("image", "mask"):
        raise ValueError(f"kind must be 'image' or 'mask', got {kind!r}")
    arr = np.asarray(image)
    if arr.shape == (th, tw):
        return arr.copy()
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float64))[None, None]
    if kind == "image":
        shrinking = th < arr.shape[0] or tw < arr.shape[1]
        out = F.interpolate(t, size=(th, tw), mode="bilinear", align_corners=False, antialias=shrinking)
    else:
        out = F.interpolate(t, size=(th, tw), mode="nearest-exact")
    return out[0, 0].numpy().astype(arr.dtype, copy=False)


def preprocess(image: np.ndarray, mask: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray, PadRecord]:
    """pad_to_square then resize to ``size``; the returned record carries the scale."""
    img, msk, rec = pad_to_square(image, mask)
    s = img.shape[0]
    rec = PadRecord(rec.pad_top, rec.pad_bottom, rec.pad_left, rec.pad_right, size / s, size / s)
    return resize(img, size, "image"), resize(msk, size, "mask"), rec


def postprocess_mask(mask: np.ndarray, rec: PadRecord) -> np.ndarray:
    """Map a square, resized mask back to original frame coordinates."""
    side = int(round(mask.shape[0] / rec.scale_y))
    return rec.unpad(resize(mask, side, "mask"))


# --------------------------------------------------------------------------- splits


@dataclass
class VideoSplit:
    train_indices: list[int]
    support_indices: list[int]
    query_indices: list[int]
    test_indices: list[int]

    def to_dict(self) -> dict:
        return {
            "train_indices": self.train_indices,
            "support_indices": self.support_indices,
            "query_indices": self.query_indices,
            "test_indices": self.test_indices,
        }


@dataclass
class SplitManifest:
    train_fraction: float
    seed: int
    videos: dict[str, VideoSplit] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "train_fraction": self.train_fraction,
            "seed": self.seed,
            "videos": {vid: s.to_dict() for vid, s in sorted(self.videos.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitManifest":
        videos = {vid: VideoSplit(**{k: list(map(int, v)) for k, v in s.items()}) for vid, s in d["videos"].items()}
        return cls(float(d["train_fraction"]), int(d["seed"]), videos)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "SplitManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def validate(self, corpus: Sequence[VideoSweep] | None = None) -> None:
        """Raise ValueError if any per-video invariant is broken."""
        all_idx = {v.video_id: set(v.frame_indices) for v in corpus} if corpus is not None else {}
        if corpus is not None and set(all_idx) != set(self.videos):
            raise ValueError("split and corpus cover different videos")
        for vid, s in self.videos.items():
            train, sup, qry, test = map(set, (s.train_indices, s.support_indices, s.query_indices, s.test_indices))
            if sup | qry != train or sup & qry:
                raise ValueError(f"{vid}: support/query must partition train")
            if train & test:
                raise ValueError(f"{vid}: train and test overlap")
            if abs(len(sup) - len(qry)) > 1 or len(train) < 2:
                raise ValueError(f"{vid}: unbalanced or too small train pool")
            if vid in all_idx and train | test != all_idx[vid]:
                raise ValueError(f"{vid}: train ∪ test does not cover the video")


def train_count(n_frames: int, fraction: float) -> int:
    return min(n_frames, max(2, round(fraction * n_frames)))


def _video_seed(video_id: str, seed: int) -> np.random.SeedSequence:
    # crc-free stable hash so the stream does not depend on PYTHONHASHSEED
    key = [b for b in video_id.encode("utf-8")]
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, len(key), *key])


def split_frame_indices(indices: Sequence[int], fraction: float, seed: int, video_id: str = "") -> VideoSplit:
    indices = sorted(int(i) for i in indices)
    n = len(indices)
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if n < 2:
        raise ValueError(f"video {video_id!r} has {n} frame(s); need >= 2 for a support/query pair")
    rng = np.random.default_rng(_video_seed(video_id, seed))
    k = train_count(n, fraction)
    chosen = rng.choice(n, size=k, replace=False)
    train = [indices[i] for i in chosen]
    order = rng.permutation(k)
    shuffled = [train[i] for i in order]
    n_sup = math.ceil(k / 2)
    train_set = set(train)
    return VideoSplit(
        train_indices=sorted(train),
        support_indices=sorted(shuffled[:n_sup]),
        query_indices=sorted(shuffled[n_sup:]),
        test_indices=[i for i in indices if i not in train_set],
    )


def split_intra_video(video: VideoSweep, fraction: float, seed: int) -> VideoSplit:
    """Randomly pick a training subset of one video and halve it into support/query."""
    return split_frame_indices(video.frame_indices, fraction, seed, video.video_id)


def split_corpus(corpus: Iterable[VideoSweep], fraction: float, seed: int) -> SplitManifest:
    manifest = SplitManifest(float(fraction), int(seed))
    for video in corpus:
        manifest.videos[video.video_id] = split_intra_video(video, fraction, seed)
    return manifest


def nearest_support(test_index: int, support_indices: Sequence[int]) -> int:
    """Support frame with the closest frame number; ties go to the smaller index."""
    if len(support_indices) == 0:
        raise ValueError("support pool is empty")
    return min(support_indices, key=lambda s: (abs(test_index - s), s))


# --------------------------------------------------------------------------- corpus I/O


def read_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "1"):
            raise CorpusError(f"{path}: expected single-channel 8-bit PNG, got mode {im.mode}")
        return np.asarray(im.convert("L"), dtype=np.uint8)


def write_png(path: str | Path, arr: np.ndarray) -> None:
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="L").save(path, optimize=False)


def image_to_u8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def load_corpus(manifest_path: str | Path) -> list[VideoSweep]:
    """Load every video listed in a corpus manifest.

    Paths inside the manifest are resolved relative to the manifest's directory.
    Masks are stored as 0/255 and mapped to {0, 1}; any other value is rejected.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise CorpusError(f"{manifest_path}: manifest not found")
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise CorpusError(f"{manifest_path}: invalid JSON ({e})") from e
    entries = doc["videos"] if isinstance(doc, dict) else doc
    if not isinstance(entries, list):
        raise CorpusError(f"{manifest_path}: expected a list of videos")
    root = manifest_path.parent
    corpus = []
    for entry in entries:
        try:
            vid, anatomy, frames = entry["video_id"], entry["anatomy"], entry["frames"]
        except (KeyError, TypeError) as e:
            raise CorpusError(f"{manifest_path}: video entry missing field {e}") from e
        loaded = []
        for fr in sorted(frames, key=lambda f: int(f["frame_index"])):
            img_path, msk_path = root / fr["image_path"], root / fr["mask_path"]
            for p in (img_path, msk_path):
                if not p.is_file():
                    raise CorpusError(f"{p}: file not found")
            img, msk = read_png(img_path), read_png(msk_path)
            if img.shape != msk.shape:
                raise CorpusError(f"{msk_path}: shape {msk.shape} does not match image {img.shape}")
            if not np.isin(msk, (0, 255)).all():
                raise CorpusError(f"{msk_path}: mask is not binary (values other than 0/255)")
            loaded.append(
                Frame(str(vid), int(fr["frame_index"]), img.astype(np.float64) / 255.0, (msk // 255).astype(np.uint8))
            )
        try:
            corpus.append(VideoSweep(str(vid), anatomy, tuple(loaded)))
        except ValueError as e:
            raise CorpusError(f"{manifest_path}: {e}") from e
    return corpus


def write_manifest(videos: list[dict], path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps({"videos": videos}, indent=2))
    return path
