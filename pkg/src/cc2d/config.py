"""Run configuration: one YAML document holding every hyperparameter.

Defaults reproduce the published settings; ``synthetic_config()`` is the
reduced-width setup used for desk-scale runs on the procedural dataset.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


VGG19_CHANNELS = [64, 128, 256, 512, 512]
VGG19_CONVS = [2, 2, 4, 4, 4]


@dataclass
class EncoderConfig:
    channels: list[int] = field(default_factory=lambda: list(VGG19_CHANNELS))
    convs: list[int] = field(default_factory=lambda: list(VGG19_CONVS))
    batch_norm: bool = True
    pretrained: bool = True

    def validate(self):
        if len(self.channels) != 5 or len(self.convs) != 5:
            raise ConfigError("encoder needs exactly 5 blocks (channels and convs of length 5)")
        if min(self.channels) < 1 or min(self.convs) < 1:
            raise ConfigError("encoder channels and convs must be positive")

    @property
    def is_vgg19(self) -> bool:
        return self.channels == VGG19_CHANNELS and self.convs == VGG19_CONVS


@dataclass
class ExtractorConfig:
    embed_dim: int = 16
    num_levels: int = 5
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    aspp_dilations: list[int] = field(default_factory=lambda: [1, 6, 12, 18])
    aspp_channels: int = 64
    shared_weights: bool = False

    def validate(self):
        if self.num_levels != 5:
            raise ConfigError(f"num_levels must be 5, got {self.num_levels}")
        if self.embed_dim < 1:
            raise ConfigError(f"embed_dim must be >= 1, got {self.embed_dim}")
        if not self.aspp_dilations or min(self.aspp_dilations) < 1:
            raise ConfigError("aspp_dilations must be a non-empty list of positive rates")
        self.encoder.validate()


@dataclass
class AugmentConfig:
    max_rotation_deg: float = 15.0
    brightness: float = 0.2
    contrast: float = 0.2
    margin_px: int = 8


@dataclass
class SSLTrainConfig:
    temperature: float = 10.0
    alpha: int = 19
    epochs: int = 3500
    lr: float = 0.001
    lr_halving_period: int = 500
    batch_size: int = 8
    levels_enabled: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    patch_size: int = 192
    target_margin: int = 32
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    checkpoint_every: int = 500

    def validate(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.alpha < 1 or self.alpha % 2 == 0:
            raise ConfigError(f"alpha must be a positive odd integer, got {self.alpha}")
        _check_levels(self.levels_enabled, "ssl.levels_enabled")
        if self.patch_size % 32:
            raise ConfigError(f"patch_size must be divisible by 32, got {self.patch_size}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr_halving_period < 1:
            raise ConfigError("epochs, batch_size and lr_halving_period must be >= 1")


@dataclass
class InferConfig:
    levels_enabled: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])

    def validate(self):
        _check_levels(self.levels_enabled, "infer.levels_enabled")


@dataclass
class TPLTrainConfig:
    sigma: float = 3.0
    epochs: int = 300
    lr: float = 0.0003
    batch_size: int = 16
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def validate(self):
        if self.sigma < 1:
            raise ConfigError(f"sigma must be >= 1, got {self.sigma}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("tpl epochs and batch_size must be >= 1")
        self.encoder.validate()


@dataclass
class RunConfig:
    network_size: int = 384
    seed: int = 0
    deterministic: bool = True
    model: ExtractorConfig = field(default_factory=ExtractorConfig)
    ssl: SSLTrainConfig = field(default_factory=SSLTrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    tpl: TPLTrainConfig = field(default_factory=TPLTrainConfig)

    def validate(self) -> "RunConfig":
        if self.network_size % 32:
            raise ConfigError(f"network_size must be divisible by 32, got {self.network_size}")
        if self.ssl.patch_size > self.network_size:
            raise ConfigError("ssl.patch_size cannot exceed network_size")
        self.model.validate()
        self.ssl.validate()
        self.infer.validate()
        self.tpl.validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path: Path) -> None:
        Path(path).write_text(self.to_yaml())


def _check_levels(levels, name):
    if not levels:
        raise ConfigError(f"{name} must be non-empty")
    if any(lv not in range(1, 6) for lv in levels) or len(set(levels)) != len(levels):
        raise ConfigError(f"{name} must be distinct levels from 1..5, got {levels}")


def _build(cls, data, path=""):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown config keys at {path or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(hints[name], value, f"{path}{name}")
    return cls(**kwargs)


def _coerce(tp, value, path):
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path + ".")
    origin = typing.get_origin(tp)
    if origin is list:
        (item,) = typing.get_args(tp)
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            value = [value]
        if isinstance(value, str):
            value = [v for v in value.replace(" ", "").split(",") if v]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return [_coerce(item, v, path) for v in value]
    if tp is bool:
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{path}: expected a boolean, got {value!r}")
    if tp in (int, float):
        if isinstance(value, bool):
            raise ConfigError(f"{path}: expected {tp.__name__}, got a boolean")
        try:
            out = tp(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: expected {tp.__name__}, got {value!r}") from None
        if tp is int and isinstance(value, float) and value != out:
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return out
    return value


def from_dict(cls, data: dict):
    """Build config dataclass ``cls`` from plain data, rejecting unknown keys."""
    return _build(cls, data)


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data).validate()


# shorthand keys accepted by --override
ALIASES = {
    "L": "model.embed_dim",
    "embed_dim": "model.embed_dim",
    "alpha": "ssl.alpha",
    "tau": "ssl.temperature",
    "temperature": "ssl.temperature",
    "sigma": "tpl.sigma",
    "levels": "infer.levels_enabled",
    "train_levels": "ssl.levels_enabled",
    "seed": "seed",
}


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``key=value`` overrides (dotted paths or aliases) and revalidate."""
    data = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        key = ALIASES.get(key.strip(), key.strip())
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config key {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = yaml.safe_load(raw) if raw.strip() else raw
    return config_from_dict(data)


def synthetic_config() -> RunConfig:
    small = EncoderConfig(channels=[16, 32, 64, 64, 64], convs=[1, 1, 2, 2, 2], pretrained=False)
    return RunConfig(
        network_size=128,
        model=ExtractorConfig(embed_dim=16, encoder=small, aspp_dilations=[1, 2, 4, 6], aspp_channels=16),
        ssl=SSLTrainConfig(epochs=2000, patch_size=64, target_margin=8, checkpoint_every=500),
        tpl=TPLTrainConfig(epochs=300, encoder=dataclasses.replace(small, channels=list(small.channels),
                                                                   convs=list(small.convs))),
    ).validate()


PRESETS = {"full": lambda: RunConfig().validate(), "synthetic": synthetic_config}


def load_config(path_or_preset: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    if path_or_preset is None:
        cfg = RunConfig().validate()
    elif str(path_or_preset) in PRESETS:
        cfg = PRESETS[str(path_or_preset)]()
    else:
        path = Path(path_or_preset)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
        cfg = config_from_dict(data)
    return apply_overrides(cfg, overrides) if overrides else cfg
