"""Training configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import InputError, ParseError

BETA_GRID = (1.0, 2.0, 5.0, 10.0, 20.0)
DELTA_GRID = (0.0, 1e-7, 1e-6, 1e-5, 1e-4)
PARAM_GROUPS = ("embedding", "encoder", "attention")


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 5.0
    delta: float = 1e-6
    margin: float = 0.1
    lr: float = 3e-3
    weight_decay: float = 0.01
    batch_size: int = 4
    epochs: int = 20
    seed: int = 0
    L: int = 12
    D: int = 64
    E: int = 64
    M: int = 16
    F: int = 64
    layers: int = 1
    min_count: int = 1
    frozen: tuple = ()
    beta_grid: tuple = BETA_GRID
    delta_grid: tuple = DELTA_GRID

    def __post_init__(self):
        if not self.beta >= 1:
            raise InputError(f"beta must be >= 1, got {self.beta}")
        if not self.delta >= 0:
            raise InputError(f"delta must be >= 0, got {self.delta}")
        if not self.margin > 0:
            raise InputError(f"margin must be > 0, got {self.margin}")
        for name in ("batch_size", "epochs", "L", "D", "E", "M", "F", "min_count"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be >= 1")
        if self.layers < 0:
            raise InputError("layers must be >= 0")
        unknown = set(self.frozen) - set(PARAM_GROUPS)
        if unknown:
            raise InputError(f"unknown parameter groups in frozen: {sorted(unknown)}")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


_FIELDS = {f.name: f for f in fields(TrainConfig)}


def coerce(name: str, raw) -> object:
    """Convert a raw string (or value) to the type of config field ``name``."""
    if name not in _FIELDS:
        raise InputError(f"unknown config key {name!r}")
    default = _FIELDS[name].default
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(default, tuple) else raw
    raw = raw.strip()
    if isinstance(default, tuple):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        return tuple(items) if name == "frozen" else tuple(float(s) for s in items)
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    return type(default)(float(raw)) if isinstance(default, int) else float(raw)


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError("expected 'key = value'", lineno)
        key, raw = (s.strip() for s in line.split("=", 1))
        try:
            values[key] = coerce(key, raw)
        except (InputError, ValueError) as exc:
            raise ParseError(str(exc), lineno) from None
    return values


def load_config(path: str | Path | None = None, **overrides) -> TrainConfig:
    """Read a config file (if given) and apply non-``None`` overrides on top."""
    values = parse_config_text(Path(path).read_text(encoding="utf-8")) if path else {}
    for key, value in overrides.items():
        if value is not None:
            values[key] = coerce(key, value)
    return TrainConfig(**values)
