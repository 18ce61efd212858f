"""Experiment configuration: one JSON document covering every stage of a run."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .composer import AugmentationConfig
from .model import ModelConfig
from .synthgen import SynthConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key (dotted path)."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class SplitConfig:
    fraction: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.fraction <= 1:
            raise ValueError("fraction: must be in (0, 1]")


@dataclass
class EvalConfig:
    test_mask_ratio: float = 0.0
    threshold: float = 0.5
    resolution: str = "original"
    seed: int = 0
    batch_size: int = 64

    def __post_init__(self):
        if not 0 <= self.test_mask_ratio <= 1:
            raise ValueError("test_mask_ratio: must be in [0, 1]")
        if not 0 <= self.threshold <= 1:
            raise ValueError("threshold: must be in [0, 1]")
        if self.resolution not in ("original", "canvas"):
            raise ValueError("resolution: must be 'original' or 'canvas'")
        if self.batch_size < 1:
            raise ValueError("batch_size: must be >= 1")


@dataclass
class ExperimentConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name).to_dict() if hasattr(getattr(self, f.name), "to_dict") else dataclasses.asdict(getattr(self, f.name)) for f in dataclasses.fields(self)}
        return json.loads(json.dumps(d))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path


SECTIONS = {"synth": SynthConfig, "split": SplitConfig, "model": ModelConfig, "train": TrainConfig, "eval": EvalConfig}


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(prefix, "expected an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"{prefix}.{key}", "unknown field")
        if cls is TrainConfig and key == "augmentation":
            value = _build(AugmentationConfig, value, f"{prefix}.augmentation")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        msg = str(e)
        head = msg.split(":", 1)[0]
        if head in names or head in {f.name for f in dataclasses.fields(AugmentationConfig)}:
            sub = f"{prefix}.augmentation" if head not in names else prefix
            raise ConfigError(f"{sub}.{head}", msg.split(":", 1)[1].strip()) from e
        raise ConfigError(prefix, msg) from e


def from_dict(data: dict[str, Any]) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "expected a JSON object")
    for key in data:
        if key not in SECTIONS:
            raise ConfigError(key, "unknown section")
    profile = data.get("model", {})
    if isinstance(profile, dict) and profile.get("profile") == "toy":
        profile = {**ModelConfig.toy().to_dict(), **{k: v for k, v in profile.items() if k != "profile"}}
        data = {**data, "model": profile}
    return ExperimentConfig(**{name: _build(cls, data.get(name, {}), name) for name, cls in SECTIONS.items()})


def load(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError("--config", f"{path} not found") from e
    except json.JSONDecodeError as e:
        raise ConfigError("--config", f"invalid JSON ({e})") from e
    return from_dict(data)


def override(cfg: ExperimentConfig, updates: dict[str, Any]) -> ExperimentConfig:
    """Apply dotted-path overrides such as ``{"train.epochs": 10}`` and revalidate."""
    d = cfg.to_dict()
    for path, value in updates.items():
        if value is None:
            continue
        node = d
        *parents, leaf = path.split(".")
        for p in parents:
            node = node[p]
        node[leaf] = value
    return from_dict(d)
