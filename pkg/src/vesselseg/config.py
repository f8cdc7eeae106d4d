"""Run configuration: typed sections, flat ``section.key = value`` text
serialization, and the two shipped profiles.

Defaults are the published training constants; ``toy_config()`` shrinks the
model and schedule to a 64x64 configuration that trains in minutes on one
CPU core.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from typing import Any


class ConfigError(ValueError):
    """Raised for unparseable or inconsistent configuration."""


@dataclass
class ModelConfig:
    full_resolution: int = 512
    encoder_channels: tuple[int, ...] = (64, 128, 256)
    bottleneck_channels: int = 512
    dropout: float = 0.4
    in_channels: int = 4

    @property
    def branch_resolutions(self) -> tuple[int, int, int, int]:
        r = self.full_resolution
        return (r, r // 2, r // 4, r // 8)

    def validate(self) -> None:
        down = 2 ** len(self.encoder_channels)
        for r in self.branch_resolutions:
            if r % down or r < down:
                raise ConfigError(
                    f"model.full_resolution: branch resolution {r} is not "
                    f"divisible by the encoder downsampling factor {down}")
        if list(self.encoder_channels) != sorted(set(self.encoder_channels)):
            raise ConfigError("model.encoder_channels must be strictly increasing")


@dataclass
class LossConfig:
    dice_weight: float = 0.40
    bce_weight: float = 0.30
    cldice_weight: float = 0.30
    dice_eps: float = 1.0
    cldice_eps: float = 1e-6
    label_smoothing: float = 0.05
    skeleton_iterations: int = 5
    # fused, then the three auxiliary branch heads (second..fourth scale)
    deep_supervision: tuple[float, float, float, float] = (0.50, 0.20, 0.15, 0.15)
    # keep the uncorrected harmonic-mean denominator available for the
    # demonstration tests; never the default
    cldice_product_denominator: bool = False

    def validate(self) -> None:
        if abs(self.dice_weight + self.bce_weight + self.cldice_weight - 1.0) > 1e-9:
            raise ConfigError("loss: composite weights must sum to 1.0")
        if abs(sum(self.deep_supervision) - 1.0) > 1e-9:
            raise ConfigError("loss.deep_supervision weights must sum to 1.0")
        if self.skeleton_iterations < 1:
            raise ConfigError("loss.skeleton_iterations must be >= 1")


@dataclass
class ScheduleConfig:
    lr: float = 1e-3
    min_lr: float = 1e-6
    first_cycle_epochs: int = 40
    cycle_mult: int = 2
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    batch_size: int = 2
    max_epochs: int = 280
    patience: int = 30
    hem_start_epoch: int = 20
    hem_top_fraction: float = 0.15
    hem_ratio: float = 3.0
    hem_every: int = 1

    def validate(self) -> None:
        if not (0 < self.min_lr < self.lr):
            raise ConfigError("schedule: need 0 < min_lr < lr")
        if self.first_cycle_epochs < 1 or self.patience < 1:
            raise ConfigError("schedule: cycle length and patience must be >= 1")
        if not (0.0 < self.hem_top_fraction < 1.0):
            raise ConfigError("schedule.hem_top_fraction must be in (0, 1)")
        if self.hem_ratio < 1.0:
            raise ConfigError("schedule.hem_ratio must be >= 1")


@dataclass
class AugmentConfig:
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    rot90_prob: float = 0.5
    ssr_prob: float = 0.5          # shift-scale-rotate
    shift_limit: float = 0.1
    scale_limit: float = 0.1
    rotate_limit_deg: float = 30.0
    elastic_prob: float = 0.5
    elastic_alpha: float = 120.0
    elastic_sigma: float = 6.0
    brightness_contrast_prob: float = 0.5
    brightness_limit: float = 0.3
    contrast_limit: float = 0.3
    hsv_prob: float = 0.5
    hue_shift: float = 0.02
    sat_shift: float = 0.1
    val_shift: float = 0.1
    clahe_prob: float = 0.5
    clahe_clip: float = 4.0
    gamma_prob: float = 0.5
    gamma_low: float = 0.80
    gamma_high: float = 1.20
    noise_prob: float = 0.5
    noise_sigma: float = 0.02
    blur_prob: float = 0.5
    blur_sigma: float = 1.0
    mixup_alpha: float = 0.2
    mixup_prob: float = 0.5

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            if f.name.endswith("_prob"):
                v = getattr(self, f.name)
                if not (0.0 <= v <= 1.0):
                    raise ConfigError(f"augment.{f.name} must be in [0, 1]")
        if self.gamma_low > self.gamma_high:
            raise ConfigError("augment: gamma range is reversed")


@dataclass
class SynthConfig:
    canvas: int = 64
    roots_min: int = 1
    roots_max: int = 3
    depth: int = 4
    root_width: float = 2.4
    width_decay: float = 0.72
    contrast: float = 0.55
    noise_sigma: float = 0.03
    tortuosity: float = 0.35

    def validate(self) -> None:
        if self.canvas < 32:
            raise ConfigError("synth.canvas must be >= 32")
        if self.root_width < 1.0:
            raise ConfigError("synth.root_width must be >= 1")
        if not (0.0 < self.contrast <= 1.0):
            raise ConfigError("synth.contrast must be in (0, 1]")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    protocol: str = "cv5"
    seed: int = 42

    def validate(self) -> None:
        self.model.validate()
        self.loss.validate()
        self.schedule.validate()
        self.augment.validate()
        self.synth.validate()
        if self.protocol not in ("cv5", "lodo", "single"):
            raise ConfigError(f"protocol must be cv5 | lodo | single, got {self.protocol!r}")


_SECTIONS = ("model", "loss", "schedule", "augment", "synth")


def _format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(text: str, proto: Any, key: str) -> Any:
    text = text.strip()
    try:
        if isinstance(proto, bool):
            if text not in ("true", "false"):
                raise ValueError(text)
            return text == "true"
        if isinstance(proto, tuple):
            parts = [p for p in text.split(",") if p.strip()]
            elem = proto[0]
            return tuple(type(elem)(p) if not isinstance(elem, float) else float(p)
                         for p in parts)
        if isinstance(proto, int):
            return int(text)
        if isinstance(proto, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


def config_to_text(cfg: RunConfig) -> str:
    lines = []
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(obj, f.name))}")
    lines.append(f"protocol = {cfg.protocol}")
    lines.append(f"seed = {cfg.seed}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if "." in key:
            section, _, name = key.partition(".")
            if section not in _SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section {section!r}")
            obj = getattr(cfg, section)
            if not hasattr(obj, name):
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            proto = getattr(obj, name)
            setattr(obj, name, _parse_value(value, proto, key))
        elif key == "protocol":
            cfg.protocol = value.strip()
        elif key == "seed":
            cfg.seed = _parse_value(value, 0, key)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    cfg.validate()
    return cfg


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_text(fh.read())


def save_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_to_text(cfg))


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(config_to_text(cfg).encode("utf-8")).hexdigest()[:16]


def paper_config() -> RunConfig:
    """Full-size defaults: 512x512, channels 64/128/256, bottleneck 512."""
    cfg = RunConfig()
    cfg.validate()
    return cfg


def toy_config() -> RunConfig:
    """Desk-scale profile: 64x64, channels 8/16/32, light augmentation.

    Augmentation keeps the cheap symmetry transforms and disables the rest;
    a few hundred optimizer steps must reach a useful validation Dice.
    """
    cfg = RunConfig()
    cfg.model = ModelConfig(full_resolution=64, encoder_channels=(8, 16, 32),
                            bottleneck_channels=64, dropout=0.1)
    cfg.schedule = ScheduleConfig(max_epochs=16, batch_size=2, patience=30)
    cfg.augment = AugmentConfig(
        hflip_prob=0.5, vflip_prob=0.5, rot90_prob=0.5,
        ssr_prob=0.0, elastic_prob=0.0, brightness_contrast_prob=0.25,
        brightness_limit=0.1, contrast_limit=0.1, hsv_prob=0.0,
        clahe_prob=0.0, gamma_prob=0.25, noise_prob=0.25, noise_sigma=0.01,
        blur_prob=0.0, mixup_prob=0.0)
    cfg.protocol = "single"
    cfg.validate()
    return cfg
