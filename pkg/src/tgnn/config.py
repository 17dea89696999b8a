"""Run configuration: model, training and generator settings.

Config files are INI-style with optional ``[model]``, ``[train]`` and
``[generator]`` sections; every key is optional and falls back to the
dataclass default.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    d: int = 32
    d_v: int = 16
    heads: int = 4
    global_depth: int = 1
    global_norm_ffn: bool = False
    gat_layers: int = 1
    gat_heads: int = 1
    strict_eq7: bool = True
    aggregate_local: bool = False
    multimodal: bool = True
    n_buckets: int = 4096
    hash_seed: int = 0
    patch_grid: int = 4
    image_size: int = 32
    image_channels: int = 3
    freeze_encoder: bool = False
    embed_init_std: float = 1.0

    def validate(self) -> None:
        for name in ("d", "d_v", "heads", "global_depth", "gat_layers", "gat_heads", "n_buckets",
                     "patch_grid", "image_size", "image_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if self.d % self.heads:
            raise ConfigError(f"model.heads ({self.heads}) must divide model.d ({self.d})")
        if self.patch_grid > self.image_size:
            raise ConfigError("model.patch_grid cannot exceed model.image_size")


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 5
    lr: float = 2e-5
    l2: float = 1e-4
    dropout: float = 0.3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    kd_direction: str = "teacher_student"
    kd_temperature: float = 1.0
    tune_fraction: float = 0.1
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")
        if self.lr < 0 or self.l2 < 0:
            raise ConfigError("train.lr and train.l2 must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("train.dropout must lie in [0, 1)")
        if self.kd_direction not in ("teacher_student", "student_teacher"):
            raise ConfigError("train.kd_direction must be teacher_student or student_teacher")
        if self.kd_temperature <= 0:
            raise ConfigError("train.kd_temperature must be positive")
        if not 0.0 <= self.tune_fraction < 1.0:
            raise ConfigError("train.tune_fraction must lie in [0, 1)")
        self.model.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping) -> "TrainConfig":
        values = dict(values)
        model = ModelConfig(**values.pop("model", {}))
        return cls(model=model, **values)


def coerce(cls, values: Mapping[str, str]):
    """Build dataclass ``cls`` from string values, converting by default-value type."""
    known = {f.name: f for f in fields(cls)}
    defaults = cls()
    kwargs = {}
    for key, raw in values.items():
        if key not in known or key == "model":
            raise ConfigError(f"unknown field {key!r} for {cls.__name__}")
        kind = type(getattr(defaults, key))
        try:
            if kind is bool:
                low = str(raw).strip().lower()
                if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                    raise ValueError(raw)
                kwargs[key] = low in ("1", "true", "yes", "on")
            else:
                kwargs[key] = kind(raw)
        except ValueError as exc:
            raise ConfigError(f"field {key!r}: cannot read {raw!r} as {kind.__name__}") from exc
    return cls(**kwargs)


def parse_config(text: str):
    """Return ``(TrainConfig, GeneratorConfig)`` from INI text."""
    from .data import GeneratorConfig

    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    unknown = set(parser.sections()) - {"model", "train", "generator"}
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    section = lambda name: dict(parser[name]) if parser.has_section(name) else {}  # noqa: E731
    train = coerce(TrainConfig, section("train"))
    train.model = coerce(ModelConfig, section("model"))
    gen = coerce(GeneratorConfig, section("generator"))
    train.validate()
    gen.validate()
    return train, gen


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def dump_config(train: TrainConfig, gen=None) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    tr = asdict(train)
    model = tr.pop("model")
    parser["model"] = {k: str(v) for k, v in model.items()}
    parser["train"] = {k: str(v) for k, v in tr.items()}
    if gen is not None:
        parser["generator"] = {k: str(v) for k, v in asdict(gen).items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
