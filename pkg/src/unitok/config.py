"""Run configuration: a YAML tree with a strict schema and defaults for every field."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import yaml

from .errors import ConfigurationError


@dataclass
class CodecSection:
    preset: str = "toy"
    steps: int = 2000
    batch_size: int = 4
    lr: float = 3e-3
    weight_decay: float = 0.0


@dataclass
class LMSection:
    preset: str = "toy"
    steps: int = 2000
    batch_size: int = 8
    peak_lr: float = 3e-3
    warmup: int = 100
    steps_per_epoch: int = 1000
    lr_decay: float = 0.98
    weight_decay: float = 0.0
    modes: list = field(default_factory=lambda: ["omni"])


@dataclass
class DataSection:
    manifest: str = None  # JSON clip manifest; synthetic pools when unset
    seed: int = 0
    duration: float = 1.0
    n_speakers: int = 4
    clips_per_speaker: int = 2
    n_interferers: int = 3
    n_noise: int = 3
    n_rir: int = 3


@dataclass
class RunConfig:
    codec: CodecSection = field(default_factory=CodecSection)
    lm: LMSection = field(default_factory=LMSection)
    data: DataSection = field(default_factory=DataSection)
    seed: int = 0
    checkpoint_every: int = 100

    def to_dict(self):
        return asdict(self)

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


_SECTIONS = {"codec": CodecSection, "lm": LMSection, "data": DataSection}


def _coerce(name, value, default):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigurationError(f"{name}: expected {type(default).__name__}, got {value!r}")
    return value


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path or 'config'}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigurationError(f"unknown key(s) {', '.join(path + k for k in unknown)}")
    instance = cls()
    for key, value in data.items():
        if key in _SECTIONS and cls is RunConfig:
            value = _build(_SECTIONS[key], value, f"{key}.")
        else:
            value = _coerce(path + key, value, getattr(instance, key))
        setattr(instance, key, value)
    return instance


def config_from_dict(data):
    return _build(RunConfig, data or {}, "")


def load_config(path):
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as err:
        raise ConfigurationError(f"{path}: {err}") from None
    return config_from_dict(data)
