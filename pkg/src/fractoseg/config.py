"""Run configuration: defaults, TOML config files, CLI overrides."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli

from .unet import DESK_WIDTHS, VGG16_REPEATS, VGG16_WIDTHS, UNetConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelSettings:
    stages: int = 5
    encoder_channels: list[int] = field(default_factory=lambda: list(VGG16_WIDTHS))
    conv_repeats: list[int] = field(default_factory=lambda: list(VGG16_REPEATS))
    num_classes: int = 3
    input_channels: int = 1

    def to_unet(self) -> UNetConfig:
        try:
            return UNetConfig(self.stages, tuple(self.encoder_channels), tuple(self.conv_repeats),
                              self.num_classes, self.input_channels)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def preset(cls, name: str, stages: int | None = None) -> "ModelSettings":
        if name == "full":
            return cls(stages or 5, list(VGG16_WIDTHS), list(VGG16_REPEATS))
        if name == "desk":
            return cls(stages or 3, list(DESK_WIDTHS), list(VGG16_REPEATS))
        raise ConfigError(f"unknown model preset {name!r} (full, desk)")


@dataclass
class RunConfig:
    model: ModelSettings = field(default_factory=ModelSettings)
    lr: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 4
    epochs: int = 40
    iters_per_epoch: int = 200
    val_iters: int = 100
    seed: int = 0
    deterministic: bool = True
    void_policy: str = "background"
    brightness_threshold: int | None = 220
    exclude_void: bool = True
    tile_size: int = 640
    split_ratios: list[float] = field(default_factory=lambda: [0.8, 0.15, 0.05])
    freeze_encoder: bool = False
    encoder_weights: str | None = None

    def validate(self) -> "RunConfig":
        positive = ("batch_size", "epochs", "iters_per_epoch", "tile_size")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.val_iters < 0:
            raise ConfigError("val_iters must be >= 0")
        if not self.lr > 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ConfigError("lr must be > 0 and betas in [0, 1)")
        if self.void_policy not in ("background", "ignore"):
            raise ConfigError(f"void_policy must be 'background' or 'ignore', got {self.void_policy!r}")
        if self.tile_size % 32:
            raise ConfigError(f"tile_size {self.tile_size} must be a multiple of 32")
        if len(self.split_ratios) != 3 or abs(sum(self.split_ratios) - 1) > 1e-9 or min(self.split_ratios) < 0:
            raise ConfigError(f"split_ratios must be three non-negative numbers summing to 1: {self.split_ratios}")
        self.model.to_unet()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        doc = dict(doc)
        model = doc.pop("model", {}) or {}
        if isinstance(model, str):
            model = asdict(ModelSettings.preset(model))
        mknown = {f.name for f in fields(ModelSettings)}
        bad = sorted(set(model) - mknown - {"preset"})
        if bad:
            raise ConfigError(f"unknown model keys: {', '.join(bad)}")
        base = ModelSettings.preset(model.pop("preset")) if "preset" in model else ModelSettings()
        for k, v in model.items():
            setattr(base, k, v)
        return cls(model=base, **doc)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, "rb") as fh:
                doc = tomli.load(fh)
        except (OSError, tomli.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            return cls.from_dict(doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
