"""Run configuration: sectioned key-value text (INI) with typed defaults.

Unknown sections or keys are rejected. Values are parsed according to the
type of their default; tuples are comma-separated.
"""
from __future__ import annotations

import configparser
import copy
import io
from pathlib import Path
from types import SimpleNamespace


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, dict[str, object]] = {
    "run": {
        "seed": 0,
    },
    "encoder": {
        "stage_channels": (16, 32, 64),
        "stage_total_strides": (4, 8, 32),
        "seed": 0,
    },
    "spatial": {
        "iters": 500,
        "batch": 8,
        "lr": 1e-3,
        "queue": 512,
        "tau_c": 0.07,
        "momentum": 0.99,
        "n_images": 2048,
        "image_size": 96,
        "crop_size": 64,
        "crop_scale": (0.35, 1.0),
        "flip_prob": 0.5,
        "jitter": 0.0,
        "proj_hidden": 64,
        "proj_dim": 32,
    },
    "temporal": {
        "iters": 2000,
        "batch": 4,
        "lr": 2e-3,
        "alpha": 1.0,
        "beta": 10.0,
        "windows": (17, 9),
        "tau": 0.07,
        "pyramid": True,
        "entropy_select": True,
        "entropy_convention": "as-written",
        "threshold": "q0.5",
        "dropout_prob": 0.8,
        "max_gap": 4,
        "n_clips": 48,
        "clip_length": 8,
        "frame_size": 64,
        "n_sprites": 2,
        "sprite_min": 16,
        "sprite_max": 30,
        "motion": 3,
        "occluder_fraction": 0.5,
        "data_seed": 1000,
    },
    "propagation": {
        "r_eval": 9,
        "top_k": 10,
        "memory": 4,
        "tau": 0.07,
    },
    "eval": {
        "n_clips": 20,
        "length": 20,
        "frame_size": 128,
        "n_sprites": 2,
        "sprite_min": 28,
        "sprite_max": 44,
        "motion": 3,
        "occluder": True,
        "seed": 900000,
    },
}


def _parse(value: str, default):
    value = value.strip()
    if isinstance(default, bool):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        parts = [p for p in value.replace("(", "").replace(")", "").split(",") if p.strip()]
        elem = default[0] if default else 0.0
        return tuple(_parse(p, elem) for p in parts)
    return value


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    def __init__(self, values: dict[str, dict[str, object]] | None = None):
        self.values = copy.deepcopy(DEFAULTS)
        for section, items in (values or {}).items():
            for key, val in items.items():
                self.set(section, key, val)

    def set(self, section: str, key: str, value) -> None:
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        default = DEFAULTS[section][key]
        if isinstance(value, str) and not isinstance(default, str):
            value = _parse(value, default)
        elif isinstance(default, tuple):
            value = tuple(value)
        elif isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        self.values[section][key] = value

    def override(self, dotted: str, value) -> None:
        if "." not in dotted:
            raise ConfigError(f"override key must look like section.key, got {dotted!r}")
        section, key = dotted.split(".", 1)
        self.set(section.replace("-", "_"), key.replace("-", "_"), value)

    def __getattr__(self, section: str) -> SimpleNamespace:
        if section.startswith("_") or section not in DEFAULTS:
            raise AttributeError(section)
        return SimpleNamespace(**self.values[section])

    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        for section, items in self.values.items():
            cp[section] = {k: _format(v) for k, v in items.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        cfg = cls()
        for section in cp.sections():
            for key, val in cp[section].items():
                try:
                    cfg.set(section, key, val)
                except (TypeError, ValueError) as exc:
                    if isinstance(exc, ConfigError):
                        raise
                    raise ConfigError(f"{section}.{key}: {exc}") from exc
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def copy(self) -> "RunConfig":
        return RunConfig(self.values)

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values
