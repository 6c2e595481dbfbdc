"""Model / training configuration and the key=value config file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .autodiff.checkpoint import format_config, parse_config_text
from .dsp import FeatureConfig, NoiseMixSpec

VARIANTS = ("timit_mlp", "vctk_conv")
KL_DIRECTIONS = ("q_to_p", "p_to_q")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 200
    seg_len: int = 20
    shared_dim: int = 256
    enc_hidden: int = 512
    head_hidden: int = 512
    dec_hidden: int = 256
    prior_hidden: int = 512
    speaker_dim: int = 64
    content_dim: int = 64
    variant: str = "timit_mlp"
    alpha: float = 1.0
    beta: float = 20.0
    kl_direction: str = "q_to_p"
    rnn_cell: str = "tanh"
    conv_kernel: int = 5

    def __post_init__(self):
        if self.speaker_dim <= 0 or self.content_dim <= 0:
            raise ConfigError("speaker_dim and content_dim must be positive")
        if self.alpha < 0 or self.beta < 0 or (self.alpha == 0 and self.beta == 0):
            raise ConfigError("alpha and beta must be nonnegative and not both zero")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ConfigError(f"kl_direction must be one of {KL_DIRECTIONS}")
        if self.rnn_cell not in ("tanh", "lstm"):
            raise ConfigError("rnn_cell must be tanh or lstm")
        for name in ("feature_dim", "seg_len", "shared_dim", "enc_hidden", "head_hidden",
                     "dec_hidden", "prior_hidden", "conv_kernel"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    epochs: int = 50
    lr_initial: float = 5e-4
    lr_decay: float = 0.95
    lr_decay_every: int = 5
    weight_decay: float = 1e-4
    augment: bool = False
    snr_min: float = 3.0
    snr_max: float = 10.0
    seed: int = 0
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.snr_min > self.snr_max:
            raise ConfigError("snr_min must not exceed snr_max")
        if not 0 <= self.test_fraction < 1:
            raise ConfigError("test_fraction must be in [0, 1)")

    @property
    def noise_spec(self) -> NoiseMixSpec | None:
        return NoiseMixSpec(self.snr_min, self.snr_max) if self.augment else None


@dataclass(frozen=True)
class RunConfig:
    feature: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict[str, str]:
        out = {}
        for section in (self.feature, self.model, self.train):
            for f in dataclasses.fields(section):
                if f.name in ("norm_mean", "norm_std"):
                    continue
                out[f.name] = _fmt(getattr(section, f.name))
        return out

    def to_text(self) -> str:
        return format_config(self.to_dict())

    def replace(self, **overrides) -> "RunConfig":
        return from_dict({**self.to_dict(), **{k: _fmt(v) for k, v in overrides.items()}})


_FEATURE_KEYS = {f.name for f in dataclasses.fields(FeatureConfig)} - {"norm_mean", "norm_std"}
_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(cls, values: dict[str, str]):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in values:
            continue
        raw = values[f.name]
        default = f.default
        try:
            if isinstance(default, bool):
                if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(raw)
                kwargs[f.name] = raw.lower() in ("true", "1", "yes")
            elif isinstance(default, int):
                kwargs[f.name] = int(raw)
            elif isinstance(default, float):
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = raw
        except ValueError:
            raise ConfigError(f"invalid value for {f.name}: {raw!r}") from None
    return cls(**kwargs)


def from_dict(values: dict[str, str]) -> RunConfig:
    unknown = set(values) - _FEATURE_KEYS - _MODEL_KEYS - _TRAIN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    try:
        feature = _coerce(FeatureConfig, values)
        model = _coerce(ModelConfig, values)
        train = _coerce(TrainConfig, values)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if model.feature_dim != feature.feature_dim:
        raise ConfigError("feature_dim differs between feature and model settings")
    return RunConfig(feature, model, train)


def parse_config(text: str) -> RunConfig:
    try:
        values = parse_config_text(text)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return from_dict(dict(values))


def load_config(path, overrides: dict | None = None) -> RunConfig:
    """Read a config file (or a shipped config name) and apply flag overrides on top."""
    p = Path(path)
    if not p.exists():
        shipped = resources.files("dsvae") / "configs" / (p.name if p.suffix else p.name + ".cfg")
        if not shipped.is_file():
            raise ConfigError(f"config file not found: {path}")
        text = shipped.read_text(encoding="utf-8")
    else:
        text = p.read_text(encoding="utf-8")
    values = dict(parse_config_text(text))
    values.update({k: _fmt(v) for k, v in (overrides or {}).items()})
    return from_dict(values)
