"""Run configuration: one flat dataclass serialized as key=value lines.

The text form is the config file format, the checkpoint snapshot, and the
target of CLI flag overrides. Parsing is strict: unknown keys, messy
values, and out-of-range numbers are all rejected up front.
"""

from __future__ import annotations

import dataclasses

from .errors import ConfigError
from .kalman import KalmanConfig
from .networks import ModelConfig


@dataclasses.dataclass
class RunConfig:
    """Everything a training or segmentation run needs, flat and typed."""

    # model
    base_channels: int = 16
    depth: int = 3
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    time_embed_dim: int = 64
    ld_enabled: bool = True
    kalman_enabled: bool = True
    fusion_enabled: bool = True
    max_offset: float = 3.0
    kalman_r: float = 0.01
    kalman_p0: float = 1.0
    kalman_x0: float = 0.0
    # diffusion
    T: int = 100
    # training
    lr: float = 1e-4
    weight_decay: float = 1e-5
    epochs: int = 20
    batch: int = 8
    seed: int = 0
    cldice_weight: float = 1.0
    patch: int = 64
    # inference
    ensemble: int = 4
    threshold: float = 0.5
    # paths
    data_dir: str = "data"
    out_dir: str = "runs/default"

    def validate(self) -> None:
        if self.T < 1:
            raise ConfigError(f"T must be at least 1, got {self.T}")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay non-negative")
        if self.epochs < 1 or self.batch < 1:
            raise ConfigError("epochs and batch must be positive")
        if self.ensemble < 1:
            raise ConfigError(f"ensemble must be at least 1, got {self.ensemble}")
        if not (0.0 <= self.threshold <= 1.0):
            raise ConfigError(f"threshold must lie in [0, 1], got {self.threshold}")
        if self.patch < 8 or self.patch % (2 ** self.depth):
            raise ConfigError(
                f"patch must be >= 8 and divisible by 2^depth, got {self.patch}"
            )
        try:
            self.model_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            base_channels=self.base_channels,
            depth=self.depth,
            channel_multipliers=tuple(self.channel_multipliers),
            time_embed_dim=self.time_embed_dim,
            ld_enabled=self.ld_enabled,
            kalman_enabled=self.kalman_enabled,
            fusion_enabled=self.fusion_enabled,
            max_offset=self.max_offset,
            kalman=KalmanConfig(r=self.kalman_r, p0=self.kalman_p0, x0_rel=self.kalman_x0),
        )

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name}={_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse_value(key: str, raw: str):
    f = _FIELDS[key]
    raw = raw.strip()
    try:
        if f.type == "bool":
            if raw not in ("true", "false"):
                raise ValueError("expected true or false")
            return raw == "true"
        if f.type == "int":
            return int(raw)
        if f.type == "float":
            return float(raw)
        if f.type == "str":
            return raw
        if f.type == "tuple[int, ...]":
            return tuple(int(v) for v in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc
    raise ConfigError(f"unhandled field type for {key}")


def parse_config(text: str) -> RunConfig:
    """Parse key=value lines (# comments, blank lines allowed) into a config."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {stripped!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw)
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """Overlay raw string values (CLI flags) onto an existing config."""
    values = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}
    for key, raw in overrides.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, raw)
    out = RunConfig(**values)
    out.validate()
    return out
