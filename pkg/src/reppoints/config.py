"""Flat ``section.key = value`` run configuration.

A config file is plain text, one assignment per line, ``#`` starts a
comment.  Every key must already exist in the defaults below; values are
parsed according to the type of the default.  :func:`format_config` writes
the fully resolved tree back out in the same format, so a logged config can
be fed straight back in.
"""

from __future__ import annotations

from dataclasses import asdict, fields
from pathlib import Path

from .appendix import DeformablePoolConfig
from .data import SceneDistribution
from .geometry import CONVERTERS
from .losses import LossConfig
from .model import ModelConfig
from .pipeline import InferConfig, TrainConfig


class ConfigError(ValueError):
    pass


SECTIONS = {
    "data": SceneDistribution,
    "model": ModelConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "infer": InferConfig,
    "appendix": DeformablePoolConfig,
}

# fields fed from elsewhere in the tree rather than set directly
DERIVED = {"train.seed"}

# keys that are not fields of any dataclass
EXTRA_DEFAULTS = {
    "run.seed": 0,
    "data.seed": 0,
    "data.scenes": 500,
    "data.heldout_scenes": 100,
    "data.dir": "",
    "eval.data_dir": "",
    "eval.checkpoint": "",
    "eval.detections": "",
    "visualize.max_images": 8,
}


def defaults() -> dict:
    out = {}
    for section, cls in SECTIONS.items():
        for k, v in asdict(cls()).items():
            if f"{section}.{k}" not in DERIVED:
                out[f"{section}.{k}"] = tuple(v) if isinstance(v, list) else v
    out.update(EXTRA_DEFAULTS)
    return out


def _parse_value(key: str, text: str, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [s for s in text.strip("()[] ").split(",") if s.strip()]
            kind = type(default[0]) if default else int
            return tuple(kind(s.strip()) for s in items)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r} (expected {type(default).__name__})") from None
    return text


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def apply_overrides(config: dict, assignments, source: str = "--set") -> dict:
    """Apply ``key=value`` strings; unknown keys raise :class:`ConfigError`."""
    config = dict(config)
    for raw in assignments:
        if "=" not in raw:
            raise ConfigError(f"{source}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in raw.split("=", 1))
        if key not in config:
            raise ConfigError(f"{source}: unknown key {key!r}")
        config[key] = _parse_value(key, value, config[key])
    return config


def parse_config_text(text: str, base: dict | None = None, source: str = "config") -> dict:
    lines = []
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value")
        lines.append((n, line))
    config = dict(base if base is not None else defaults())
    for n, line in lines:
        config = apply_overrides(config, [line], f"{source}:{n}")
    return config


def load_config(path=None, overrides=(), seed: int | None = None) -> dict:
    config = defaults()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        config = parse_config_text(p.read_text(), config, str(p))
    config = apply_overrides(config, overrides)
    if seed is not None:
        config["run.seed"] = int(seed)
    validate(config)
    return config


def validate(config: dict) -> None:
    if config["model.converter"] not in CONVERTERS:
        raise ConfigError(f"model.converter must be one of {CONVERTERS}")
    for section in SECTIONS:
        try:
            build(config, section)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"invalid {section} settings: {err}") from None


def section(config: dict, name: str) -> dict:
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in config.items() if k.startswith(prefix)}


def build(config: dict, name: str):
    """Instantiate the dataclass behind a section from the resolved config."""
    cls = SECTIONS[name]
    values = section(config, name)
    if name == "train":
        values["seed"] = config["run.seed"]
    obj = cls(**{f.name: values[f.name] for f in fields(cls) if f.name in values})
    if hasattr(obj, "validate"):
        obj.validate()
    return obj


def format_config(config: dict) -> str:
    return "".join(f"{k} = {_format_value(config[k])}\n" for k in sorted(config))


def to_snapshot(config: dict) -> dict:
    """JSON-ready copy stored inside checkpoints."""
    return {k: list(v) if isinstance(v, tuple) else v for k, v in config.items()}


def from_snapshot(snapshot: dict) -> dict:
    """Inverse of :func:`to_snapshot`; keys unknown to this version are rejected."""
    config = defaults()
    for key, value in snapshot.items():
        if key not in config:
            raise ConfigError(f"checkpoint config has unknown key {key!r}")
        config[key] = tuple(value) if isinstance(value, list) else value
    validate(config)
    return config
