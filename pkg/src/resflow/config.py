"""Flat key = value run configuration with lossless file round-tripping.

Every knob has an overridable default; ``RESFLOW_SEED`` in the environment
overrides the seed from any other source.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path

SEED_ENV_VAR = "RESFLOW_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    tile_px: int = 500
    overlap_px: int = 0
    n_bits: int = 32
    k: int = 0  # 0 selects the bucket count from [k_min, k_max]
    k_min: int = 2
    k_max: int = 10
    feature_dim: int = 48
    cluster_method: str = "agglomerative"
    workers: int = 4
    devices: int = 4
    tickets_per_device: int = 2
    ticket_timeout_s: float = 30.0
    simulate: bool = False
    cost_base_ms: float = 5.0
    cost_ms_per_megapixel: float = 1.0
    cost_io_ms_per_megabyte: float = 0.0
    batch: int = 12
    baseline_s_per_scene: float = 2100.0
    seed: int = 0
    task: str = "building"
    scenes: int = 3
    scene_px: int = 1500
    gsd_m: float = 0.5
    distributions: int = 6

    def validate(self) -> "RunConfig":
        if self.tile_px <= 0:
            raise ConfigError(f"tile_px must be positive, got {self.tile_px}")
        if not 0 <= self.overlap_px < self.tile_px:
            raise ConfigError(f"overlap_px must be in [0, tile_px), got {self.overlap_px}")
        if self.n_bits <= 0:
            raise ConfigError(f"n_bits must be positive, got {self.n_bits}")
        if self.cluster_method not in ("kmeans", "agglomerative"):
            raise ConfigError(f"unknown cluster_method {self.cluster_method!r}")
        if self.k < 0 or self.k_min < 1 or self.k_max < self.k_min:
            raise ConfigError("bucket count range is inconsistent")
        if min(self.workers, self.devices, self.tickets_per_device, self.batch) < 1:
            raise ConfigError("workers, devices, tickets_per_device, batch must be >= 1")
        if self.scenes < 1 or self.scene_px < 1:
            raise ConfigError("scenes and scene_px must be >= 1")
        if self.distributions < 1:
            raise ConfigError("distributions must be >= 1")
        if self.gsd_m <= 0:
            raise ConfigError("gsd_m must be positive")
        return self


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(raw: str, typ, key: str):
    raw = raw.strip()
    try:
        if typ is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {e}") from e


def emit_config(config: RunConfig) -> str:
    return "".join(f"{f.name} = {_render(getattr(config, f.name))}\n" for f in fields(RunConfig))


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    config = base if base is not None else RunConfig()
    # field annotations are strings under future annotations; take types from defaults
    field_types = {f.name: type(getattr(RunConfig(), f.name)) for f in fields(RunConfig)}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in field_types:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        setattr(config, key, _parse_value(raw, field_types[key], key))
    return config


def load_config(path=None, overrides=None, env=None) -> RunConfig:
    """Build a config from file, then ``key=value`` overrides, then the env seed."""
    env = os.environ if env is None else env
    config = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        config = parse_config(p.read_text(encoding="utf-8"), base=config)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        config = parse_config(item, base=config)
    if SEED_ENV_VAR in env:
        try:
            config.seed = int(env[SEED_ENV_VAR])
        except ValueError as e:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer: {e}") from e
    return config.validate()
