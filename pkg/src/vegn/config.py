"""Plain-text ``key = value`` run configs with provenance tracking."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from typing import Any

from .model import ModelConfig
from .trainer import TrainConfig

SEED_ENV = "VEGN_SEED"


@dataclass
class DistOptions:
    devices: int = 1
    partition: str = "random"
    radius_mode: str = "fixed"
    radius: float = 0.0  # 0 keeps the sample's own edges
    transport: str = "inproc"


_SECTIONS = (ModelConfig, TrainConfig, DistOptions)


def _defaults() -> dict[str, Any]:
    out: dict[str, Any] = {}
    for cls in _SECTIONS:
        inst = cls()
        for f in fields(cls):
            out[f.name] = getattr(inst, f.name)
    return out


DEFAULTS = _defaults()


class ConfigError(ValueError):
    pass


def _coerce(key: str, text: str) -> Any:
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from exc
    return text


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=lambda: dict(DEFAULTS))
    sources: dict[str, str] = field(default_factory=lambda: {k: "default" for k in DEFAULTS})

    @classmethod
    def resolve(cls, path: str | None = None, flags: dict[str, Any] | None = None,
                env: dict[str, str] | None = None) -> "RunConfig":
        """default < config file < VEGN_SEED < command-line flag."""
        cfg = cls()
        if path:
            with open(path) as fh:
                cfg._update(parse_config_text(fh.read(), path), f"file:{path}")
        env = os.environ if env is None else env
        if env.get(SEED_ENV):
            cfg._update({"seed": _coerce("seed", env[SEED_ENV])}, f"env:{SEED_ENV}")
        if flags:
            cfg._update({k: v for k, v in flags.items() if v is not None}, "flag")
        cfg.model()
        cfg.train()
        cfg.dist()
        return cfg

    def _update(self, new: dict[str, Any], source: str) -> None:
        for k, v in new.items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown key {k!r}")
            self.values[k] = v
            self.sources[k] = source

    def _section(self, cls):
        try:
            return cls(**{f.name: self.values[f.name] for f in fields(cls)})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def model(self) -> ModelConfig:
        return self._section(ModelConfig)

    def train(self) -> TrainConfig:
        return self._section(TrainConfig)

    def dist(self) -> DistOptions:
        d = self._section(DistOptions)
        if d.devices < 1:
            raise ConfigError("devices must be >= 1")
        if d.partition not in ("random", "grid"):
            raise ConfigError(f"unknown partition {d.partition!r}")
        if d.radius_mode not in ("fixed", "dynamic"):
            raise ConfigError(f"unknown radius_mode {d.radius_mode!r}")
        if d.transport not in ("inproc", "socket"):
            raise ConfigError(f"unknown transport {d.transport!r}")
        if d.radius_mode == "dynamic" and d.radius <= 0:
            raise ConfigError("radius_mode = dynamic needs radius > 0")
        return d

    def render(self) -> str:
        lines = ["# resolved run configuration (value  # source)"]
        for k in sorted(self.values):
            lines.append(f"{k} = {self.values[k]}  # {self.sources[k]}")
        return "\n".join(lines) + "\n"
