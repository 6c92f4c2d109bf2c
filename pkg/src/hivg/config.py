"""Run configuration: model shape, loss weights, training plan and data budget.

Loaded from a nested YAML (or JSON) mapping with sections ``model``, ``loss``,
``train``, ``data`` and a top-level ``seed``. Unknown keys are rejected.

Full-scale reference values, for orientation: batch 60/80, phase-A 50 epochs,
20 epochs per HiLoRA stage, rank 32. The defaults here are the desk-scale
budget.
"""
from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import yaml


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_height: int = 64
    image_width: int = 64
    patch_size: int = 8
    visual_layers: int = 6
    visual_width: int = 64
    visual_heads: int = 4
    text_layers: int = 4
    text_width: int = 32
    text_heads: int = 4
    ground_layers: int = 2
    ground_width: int = 64
    ground_heads: int = 4
    mlp_ratio: int = 4
    visual_taps: tuple[int, ...] = (1, 2, 4, 6)
    text_taps: tuple[int, ...] | None = None  # None -> every text layer
    bridge_layers: tuple[int, ...] = (2, 4, 6)
    bridge_heads: int = 4
    bridge_ffn_ratio: int = 2
    vocab_size: int = 18
    max_text_len: int = 16
    lora_rank: int = 4
    lora_alpha: float = 16.0
    hilora_groups: int = 3
    clc_dim: int = 32
    rtcc_init_scale: float = 10.0
    dtype: str = "float32"

    def __post_init__(self) -> None:
        for name in ("visual_taps", "bridge_layers"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.text_taps is not None:
            self.text_taps = tuple(int(v) for v in self.text_taps)
        self.validate()

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_height // self.patch_size, self.image_width // self.patch_size

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def grounding_len(self) -> int:
        return 2 + self.num_patches + self.max_text_len

    @property
    def text_tap_layers(self) -> tuple[int, ...]:
        return tuple(range(1, self.text_layers + 1)) if self.text_taps is None else self.text_taps

    def validate(self) -> None:
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ConfigError(
                f"image {self.image_height}x{self.image_width} not divisible by patch size {self.patch_size}"
            )
        for name, taps, depth in (
            ("visual_taps", self.visual_taps, self.visual_layers),
            ("bridge_layers", self.bridge_layers, self.visual_layers),
            ("text_taps", self.text_tap_layers, self.text_layers),
        ):
            if name != "bridge_layers" and not taps:
                raise ConfigError(f"{name} must not be empty")
            if any(not 1 <= t <= depth for t in taps) or len(set(taps)) != len(taps):
                raise ConfigError(f"{name}={taps} must be distinct layers in [1, {depth}]")
        if self.visual_layers % self.hilora_groups:
            raise ConfigError(f"hilora_groups={self.hilora_groups} must divide visual_layers={self.visual_layers}")
        smallest = min(self.visual_width, self.text_width)
        if not 0 < self.lora_rank < smallest:
            raise ConfigError(f"lora_rank={self.lora_rank} must satisfy 0 < r < min(d, k) = {smallest}")
        if self.lora_alpha <= 0:
            raise ConfigError("lora_alpha must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.max_text_len < 3:
            raise ConfigError("max_text_len must leave room for SOS, one word and EOS")


@dataclass
class LossWeights:
    l1: float = 2.0
    giou: float = 2.0
    focal: float = 20.0
    dice: float = 2.0
    tau: float = 0.07
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_eps: float = 1.0
    smooth_l1_beta: float = 1.0

    def __post_init__(self) -> None:
        for name in ("l1", "giou", "focal", "dice"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be non-negative")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")


@dataclass
class StagePlan:
    lr: float
    epochs: int


@dataclass
class TrainPlan:
    phase_a_lr: float = 2.5e-4
    phase_a_epochs: int = 30
    stages: list[StagePlan] = field(
        default_factory=lambda: [StagePlan(1.0e-4, 5), StagePlan(0.5e-4, 5), StagePlan(0.25e-4, 5)]
    )
    weight_decay: float = 1.0e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1.0e-8
    batch_size: int = 32
    lora_mode: str = "hilora"  # hilora | vanilla | none
    freeze_grounding_in_stages: bool = False
    clc_phases: str = "both"  # both | b
    grad_clip: float | None = None
    eval_batch_size: int = 128

    def __post_init__(self) -> None:
        self.stages = [s if isinstance(s, StagePlan) else _build(StagePlan, s, "train.stages") for s in self.stages]
        self.betas = tuple(self.betas)
        if self.lora_mode not in ("hilora", "vanilla", "none"):
            raise ConfigError(f"lora_mode must be hilora, vanilla or none, got {self.lora_mode}")
        if self.clc_phases not in ("both", "b"):
            raise ConfigError("clc_phases must be 'both' or 'b'")
        if self.batch_size <= 0 or self.phase_a_epochs < 0:
            raise ConfigError("batch_size must be positive and epochs non-negative")
        lrs = [s.lr for s in self.stages]
        if any(b > a for a, b in zip(lrs, lrs[1:])):
            raise ConfigError(f"stage learning rates must be non-increasing, got {lrs}")


@dataclass
class DataConfig:
    train_count: int = 4000
    val_count: int = 500
    test_count: int = 500
    difficulty: str = "attribute"

    def __post_init__(self) -> None:
        if self.difficulty not in ("attribute", "relational", "two-hop"):
            raise ConfigError(f"unknown difficulty {self.difficulty!r}")
        if min(self.train_count, self.val_count, self.test_count) < 0:
            raise ConfigError("data counts must be non-negative")


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainPlan = field(default_factory=TrainPlan)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict[str, Any]:
        return _plain(asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(data: dict[str, Any]) -> RunConfig:
    data = dict(data or {})
    sections = {"model": ModelConfig, "loss": LossWeights, "train": TrainPlan, "data": DataConfig}
    unknown = sorted(set(data) - set(sections) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    kwargs: dict[str, Any] = {"seed": int(data.get("seed", 0))}
    for name, cls in sections.items():
        kwargs[name] = _build(cls, data.get(name, {}) or {}, name)
    return RunConfig(**kwargs)


def load_config(path: str | Path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return config_from_dict(yaml.safe_load(fh) or {})


def save_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


def model_config_from_dict(data: dict[str, Any]) -> ModelConfig:
    return _build(ModelConfig, data, "model")


def replace(obj, **changes):
    return dataclasses.replace(obj, **changes)
