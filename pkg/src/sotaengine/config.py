"""Engine configuration: JSON file, overridden by flags, env var for the state dir."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .registry import DEFAULT_S_MAX, DEFAULT_S_MIN

STATE_DIR_ENV = "AUTOSOTA_STATE_DIR"


@dataclass
class EngineConfig:
    state_dir: str | None = None
    out_dir: str | None = None
    # downloads
    size_min: int = DEFAULT_S_MIN
    size_max: int = DEFAULT_S_MAX
    concurrency: int = 4
    download_timeout: float = 1800.0
    hub_patterns: list | None = None
    # rubric
    total_weight: str = "100"
    weight_threshold: str = "10"
    max_depth: int = 4
    tier_boundaries: list | None = None
    # optimization
    backend: str = "sim"
    seed: int = 0
    max_iterations: int = 20
    success_threshold: str | None = None
    debug_budget: int = 2
    leap_window: int = 3
    honeymoon_length: int = 5
    min_ideas: int = 10
    eval_timeout: float = 10.0
    final_tolerance: str | None = None
    r4_tolerance: str = "0.10"
    wall_clock_limit: float | None = None
    # fleet
    units: int = 1
    devices_per_unit: int = 2
    poll_interval: float = 1.0

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path: str | Path | None) -> EngineConfig:
    if path is None:
        return EngineConfig()
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except ValueError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = sorted(set(data) - set(EngineConfig.keys()))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return EngineConfig(**data)


def merge_flags(cfg: EngineConfig, flags: dict) -> EngineConfig:
    """Flags that were given (not None) override file values."""
    values = cfg.to_dict()
    for key, value in flags.items():
        if key in values and value is not None:
            values[key] = value
    return EngineConfig(**values)


def resolve_state_dir(cfg: EngineConfig) -> Path:
    raw = cfg.state_dir or os.environ.get(STATE_DIR_ENV)
    if not raw:
        raise ConfigError(f"no state directory: pass --state-dir, set state_dir in the config, or set {STATE_DIR_ENV}")
    return Path(raw)
