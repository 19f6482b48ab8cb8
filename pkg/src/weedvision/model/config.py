"""Configuration types for the encoder, detector, and training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Optional

from ..errors import ConfigError

BRANCH_MODES = ("yolo_only", "vit_only", "dual")
HEAD_VARIANTS = ("plain", "dfl")
INPUT_NORMS = ("znorm", "scale01")


def _half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def default_tap_layers(depth: int) -> tuple[int, int, int]:
    """Block indices exported for the three pyramid levels.

    Preserves the relative depths 5/12, 8/12, 11/12 of the full-size
    encoder's export points.
    """
    return (_half_up(depth * 5 / 12), _half_up(depth * 8 / 12), depth - 1)


@dataclass(frozen=True)
class ViTConfig:
    patch_size: int = 16
    embed_dim: int = 64
    depth: int = 6
    heads: int = 4
    tap_layers: Optional[tuple[int, ...]] = None
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.patch_size < 1 or self.depth < 1 or self.heads < 1:
            raise ConfigError("patch_size, depth, and heads must be positive")
        if self.embed_dim % self.heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        taps = self.tap_layers
        if taps is None:
            taps = default_tap_layers(self.depth)
        taps = tuple(int(t) for t in taps)
        object.__setattr__(self, "tap_layers", taps)
        if any(b <= a for a, b in zip(taps, taps[1:])):
            raise ConfigError(f"tap_layers must be strictly increasing, got {taps}")
        if taps and (taps[0] < 0 or taps[-1] >= self.depth):
            raise ConfigError(f"tap_layers {taps} outside [0, {self.depth})")

    def to_dict(self) -> dict:
        return {
            "patch_size": self.patch_size,
            "embed_dim": self.embed_dim,
            "depth": self.depth,
            "heads": self.heads,
            "tap_layers": list(self.tap_layers),
            "mlp_ratio": self.mlp_ratio,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ViTConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown encoder config keys: {sorted(unknown)}")
        if doc.get("tap_layers") is not None:
            doc = dict(doc, tap_layers=tuple(doc["tap_layers"]))
        return cls(**doc)


@dataclass(frozen=True)
class DetectorConfig:
    branch_mode: str = "dual"
    use_sta: bool = False
    use_align_loss: bool = False
    align_weight: float = 1.0
    align_detach_vit: bool = False
    head_variant: str = "plain"
    dfl_bins: int = 8
    head_channels: int = 64
    head_attention: bool = False
    input_norm: str = "znorm"
    input_size: int = 128
    num_classes: int = 2
    vit: ViTConfig = field(default_factory=ViTConfig)

    def __post_init__(self):
        if self.branch_mode not in BRANCH_MODES:
            raise ConfigError(f"branch_mode must be one of {BRANCH_MODES}")
        if self.head_variant not in HEAD_VARIANTS:
            raise ConfigError(f"head_variant must be one of {HEAD_VARIANTS}")
        if self.input_norm not in INPUT_NORMS:
            raise ConfigError(f"input_norm must be one of {INPUT_NORMS}")
        if self.use_align_loss and self.branch_mode != "dual":
            raise ConfigError("alignment loss requires branch_mode='dual'")
        if self.head_variant == "dfl" and self.dfl_bins < 2:
            raise ConfigError("dfl_bins must be >= 2 for the dfl head")
        if self.input_size % 32:
            raise ConfigError(f"input_size {self.input_size} not divisible by 32")
        if self.head_channels % 8:
            raise ConfigError("head_channels must be divisible by 8")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.branch_mode != "yolo_only":
            if self.input_size % self.vit.patch_size:
                raise ConfigError(
                    f"input_size {self.input_size} not divisible by patch size "
                    f"{self.vit.patch_size}"
                )
            if len(self.vit.tap_layers) != 3:
                raise ConfigError("detector needs exactly 3 tap layers")

    def to_dict(self) -> dict:
        doc = {
            "branch_mode": self.branch_mode,
            "use_sta": self.use_sta,
            "use_align_loss": self.use_align_loss,
            "align_weight": self.align_weight,
            "align_detach_vit": self.align_detach_vit,
            "head_variant": self.head_variant,
            "dfl_bins": self.dfl_bins,
            "head_channels": self.head_channels,
            "head_attention": self.head_attention,
            "input_norm": self.input_norm,
            "input_size": self.input_size,
            "num_classes": self.num_classes,
            "vit": self.vit.to_dict(),
        }
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "DetectorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown detector config keys: {sorted(unknown)}")
        doc = dict(doc)
        if "vit" in doc and isinstance(doc["vit"], dict):
            doc["vit"] = ViTConfig.from_dict(doc["vit"])
        return cls(**doc)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 68
    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 8
    seed: int = 0
    split: str = "75:5:25"
    cls_weight: float = 1.0
    box_weight: float = 2.0
    warmup_epochs: int = 3
    lr_floor_ratio: float = 0.05

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("lr, momentum, and weight_decay must be >= 0")
        if not 0.0 <= self.lr_floor_ratio <= 1.0:
            raise ConfigError("lr_floor_ratio must lie in [0, 1]")
        parse_split(self.split)

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "lr": self.lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "split": self.split,
            "cls_weight": self.cls_weight,
            "box_weight": self.box_weight,
            "warmup_epochs": self.warmup_epochs,
            "lr_floor_ratio": self.lr_floor_ratio,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**doc)


def parse_split(split: str) -> tuple[float, float, float]:
    """Parse "75:5:25"-style ratios into fractions summing to 1."""
    try:
        parts = [float(p) for p in split.split(":")]
    except ValueError as exc:
        raise ConfigError(f"bad split string {split!r}") from exc
    if len(parts) != 3 or any(p < 0 for p in parts) or sum(parts) <= 0:
        raise ConfigError(f"split must be three non-negative ratios, got {split!r}")
    total = sum(parts)
    return tuple(p / total for p in parts)
