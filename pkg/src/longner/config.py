"""Run configuration: dataclass sections, strict YAML loading, env overrides.

Sections mirror the subsystems (encoder, span, bispa, train, decode, data).
Unknown keys are rejected; every key has a default so an empty file is a
valid configuration. Environment variables of the form
``LONGNER_<SECTION>_<KEY>`` override file values, and CLI flags override
both.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    d: int = 128
    heads: int = 4
    layers: int = 2
    window: int = 32
    logn_base: float = 512.0
    max_len: int = 2048
    lora_rank: int = 0
    lora_alpha: float = 8.0
    lora_freeze_base: bool = True
    mask_prob: float = 0.15

    def validate(self) -> None:
        if self.d <= 0 or self.d % self.heads != 0:
            raise ConfigError(f"encoder.d ({self.d}) must be a positive multiple of encoder.heads ({self.heads})")
        if self.window < 1:
            raise ConfigError(f"encoder.window must be >= 1, got {self.window}")
        if self.lora_rank < 0 or self.lora_rank > self.d:
            raise ConfigError(f"encoder.lora_rank must be in [0, d], got {self.lora_rank}")
        if self.logn_base <= 1:
            raise ConfigError(f"encoder.logn_base must exceed 1, got {self.logn_base}")
        if not 0.0 <= self.mask_prob < 1.0:
            raise ConfigError(f"encoder.mask_prob must be in [0, 1), got {self.mask_prob}")
        if self.max_len < 2:
            raise ConfigError(f"encoder.max_len must be >= 2, got {self.max_len}")


@dataclass
class SpanConfig:
    band_halfwidth: int = 16
    channels: int = 64

    def validate(self) -> None:
        if self.band_halfwidth < 1:
            raise ConfigError(f"span.band_halfwidth must be >= 1, got {self.band_halfwidth}")
        if self.channels < 2 or self.channels % 2 != 0:
            raise ConfigError(f"span.channels must be even and >= 2, got {self.channels}")


@dataclass
class BispaConfig:
    blocks: int = 2
    channels: int | None = None  # defaults to span.channels; must match if set
    rope_base: float = 10000.0

    def validate(self) -> None:
        if self.blocks < 1:
            raise ConfigError(f"bispa.blocks must be >= 1, got {self.blocks}")
        if self.rope_base <= 1:
            raise ConfigError(f"bispa.rope_base must exceed 1, got {self.rope_base}")


@dataclass
class TrainConfig:
    epochs: int = 8
    batch_size: int = 4
    lr: float = 3e-4
    weight_decay: float = 1e-2
    seed: int = 42
    eval_every: int = 0  # optimizer steps between dev evals; 0 = once per epoch
    max_steps: int = 0  # 0 = no cap
    stop_f1: float = 0.0  # stop early once dev F1 reaches this; 0 disables
    dtype: str = "float64"
    checkpoint_dir: str = "checkpoints"

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("train.epochs and train.batch_size must be positive")
        if self.lr <= 0:
            raise ConfigError(f"train.lr must be positive, got {self.lr}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"train.dtype must be float64 or float32, got {self.dtype!r}")


@dataclass
class DecodeConfig:
    threshold: float = 0.0
    oracle_max_len: int = 64

    def validate(self) -> None:
        if self.oracle_max_len < 1:
            raise ConfigError("decode.oracle_max_len must be positive")


@dataclass
class DataConfig:
    max_seg_len: int = 1024
    stride: int = 512

    def validate(self) -> None:
        if not 1 <= self.stride <= self.max_seg_len:
            raise ConfigError(
                f"data.stride must satisfy 1 <= stride <= max_seg_len, got {self.stride} / {self.max_seg_len}")


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    span: SpanConfig = field(default_factory=SpanConfig)
    bispa: BispaConfig = field(default_factory=BispaConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    data: DataConfig = field(default_factory=DataConfig)

    @property
    def channels(self) -> int:
        return self.span.channels if self.bispa.channels is None else self.bispa.channels

    def validate(self) -> None:
        for section in (self.encoder, self.span, self.bispa, self.train, self.decode, self.data):
            section.validate()
        if self.bispa.channels is not None and self.bispa.channels != self.span.channels:
            raise ConfigError(
                f"bispa.channels ({self.bispa.channels}) must equal span.channels ({self.span.channels})")


_SECTIONS = {
    "encoder": EncoderConfig,
    "span": SpanConfig,
    "bispa": BispaConfig,
    "train": TrainConfig,
    "decode": DecodeConfig,
    "data": DataConfig,
}

ENV_PREFIX = "LONGNER_"


def _coerce(raw: str, target_type):
    if target_type is bool or isinstance(target_type, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"cannot parse boolean from {raw!r}")
    return yaml.safe_load(raw)


def _build_section(name: str, cls, values: dict):
    known = {f.name: f for f in fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in section {name!r}: {sorted(unknown)}")
    return cls(**values)


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"top-level config must be a mapping, got {type(raw).__name__}")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    sections = {}
    for name, cls in _SECTIONS.items():
        vals = raw.get(name) or {}
        if not isinstance(vals, dict):
            raise ConfigError(f"section {name!r} must be a mapping")
        sections[name] = _build_section(name, cls, vals)
    cfg = RunConfig(**sections)
    return cfg


def apply_env_overrides(cfg: RunConfig, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    for section_name, cls in _SECTIONS.items():
        section = getattr(cfg, section_name)
        for f in fields(cls):
            var = f"{ENV_PREFIX}{section_name.upper()}_{f.name.upper()}"
            if var in environ:
                setattr(section, f.name, _coerce(environ[var], f.type if f.type is bool else type(getattr(section, f.name))))
    return cfg


def load_config(path: str | None, overrides: dict | None = None, environ=None) -> RunConfig:
    """Load YAML config; apply env then explicit ``{"section.key": value}`` overrides."""
    raw = {}
    if path is not None:
        with open(path) as fh:
            try:
                raw = yaml.safe_load(fh) or {}
            except yaml.YAMLError as e:
                mark = getattr(e, "problem_mark", None)
                line = f" at line {mark.line + 1}" if mark is not None else ""
                raise ConfigError(f"config parse error{line}: {e}") from e
    cfg = config_from_dict(raw)
    apply_env_overrides(cfg, environ)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        try:
            section_name, key = dotted.split(".", 1)
            section = getattr(cfg, section_name)
            if not any(f.name == key for f in fields(section)):
                raise AttributeError
        except (ValueError, AttributeError):
            raise ConfigError(f"unknown override key {dotted!r}")
        setattr(section, key, value)
    cfg.validate()
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    return {name: dataclasses.asdict(getattr(cfg, name)) for name in _SECTIONS}
