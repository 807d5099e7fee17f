"""Run configuration.

One flat dataclass covers every stage; a TOML file overrides any subset
of fields and an optional ``include`` key layers one file on top of
another (the included file is loaded first, then the including file's
keys win).  Unknown keys are rejected rather than ignored so that a
typo in a config does not silently run with defaults.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .ingest import (
    DEFAULT_WINDOW_LENGTH_NS,
    DEFAULT_WINDOW_STEP_NS,
    EVENT_VOCABULARY,
)

DEFAULT_INTERNAL_NETWORKS = (
    "10.0.0.0/8",
    "172.16.0.0/12",
    "192.168.0.0/16",
    "127.0.0.0/8",
    "169.254.0.0/16",
    "::1/128",
    "fe80::/10",
    "fc00::/7",
)


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    # Windowing
    window_length_ns: int = DEFAULT_WINDOW_LENGTH_NS
    window_step_ns: int = DEFAULT_WINDOW_STEP_NS

    # Deviation analysis
    lof_k: int = 20
    contamination: float = 0.1

    # Graph analysis
    internal_networks: tuple[str, ...] = DEFAULT_INTERNAL_NETWORKS
    causal_relay: bool = True
    unknown_event_policy: str = "skip"  # or "abort"
    seed: int = 7

    # Reasoner
    backend: str = "stub"  # or "remote"
    rules_path: str = ""  # empty -> packaged default rules
    endpoint: str = ""
    model_name: str = ""
    backend_retries: int = 2
    backend_timeout_s: float = 30.0

    # Response thresholds.  alert_threshold gates alert emission; the two
    # band values decide queue membership and never move with it.
    alert_threshold: float = 0.8
    primary_band: float = 0.8
    secondary_band: float = 0.7
    complete_band: float = 0.9

    # Temporal correlation
    decay_rate: float = 0.025
    reanalysis_cadence: int = 2
    merge_on_objects: bool = False

    # Rolling graph memory budget
    untagged_horizon_windows: int = 1
    tagged_retention_windows: int = 8
    node_cap: int = 200_000

    # Ingest
    event_vocabulary: tuple[str, ...] = EVENT_VOCABULARY
    strict_parse: bool = False

    def validate(self) -> "PipelineConfig":
        if self.window_length_ns <= 0 or self.window_step_ns <= 0:
            raise ConfigError("window length and step must be positive")
        if self.window_step_ns > self.window_length_ns:
            raise ConfigError("window step larger than window length leaves gaps")
        if self.lof_k < 1:
            raise ConfigError("lof_k must be at least 1")
        if not 0.0 < self.contamination < 1.0:
            raise ConfigError("contamination must lie in (0, 1)")
        if not 0.0 <= self.secondary_band <= self.primary_band <= 1.0:
            raise ConfigError("queue bands must satisfy 0 <= secondary <= primary <= 1")
        if not 0.0 <= self.alert_threshold <= 1.0:
            raise ConfigError("alert_threshold must lie in [0, 1]")
        if self.decay_rate < 0.0:
            raise ConfigError("decay_rate must be non-negative")
        if self.reanalysis_cadence < 1:
            raise ConfigError("reanalysis_cadence must be at least 1")
        if self.unknown_event_policy not in ("skip", "abort"):
            raise ConfigError("unknown_event_policy must be 'skip' or 'abort'")
        if self.backend not in ("stub", "remote"):
            raise ConfigError("backend must be 'stub' or 'remote'")
        if self.untagged_horizon_windows < 0 or self.tagged_retention_windows < 0:
            raise ConfigError("retention horizons must be non-negative")
        if self.node_cap < 1:
            raise ConfigError("node_cap must be positive")
        return self

    def override(self, **kwargs) -> "PipelineConfig":
        return _apply(self, kwargs).validate()

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        return _apply(cls(), _load_toml(Path(path))).validate()


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}
_TUPLE_FIELDS = {"internal_networks", "event_vocabulary"}


def _load_toml(path: Path, depth: int = 0) -> dict:
    if depth > 8:
        raise ConfigError(f"include chain too deep at {path}")
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"bad TOML in {path}: {exc}") from exc
    include = raw.pop("include", None)
    if include is None:
        return raw
    if not isinstance(include, str):
        raise ConfigError(f"include must be a path string in {path}")
    base = _load_toml((path.parent / include).resolve(), depth + 1)
    base.update(raw)
    return base


def _apply(cfg: PipelineConfig, values: dict) -> PipelineConfig:
    unknown = set(values) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    coerced = {}
    for key, val in values.items():
        if key in _TUPLE_FIELDS:
            if not isinstance(val, (list, tuple)) or not all(
                isinstance(x, str) for x in val
            ):
                raise ConfigError(f"{key} must be a list of strings")
            coerced[key] = tuple(val)
        elif isinstance(getattr(cfg, key), bool):
            if not isinstance(val, bool):
                raise ConfigError(f"{key} must be a boolean")
            coerced[key] = val
        elif isinstance(getattr(cfg, key), int) and not isinstance(
            getattr(cfg, key), bool
        ):
            if isinstance(val, bool) or not isinstance(val, int):
                raise ConfigError(f"{key} must be an integer")
            coerced[key] = val
        elif isinstance(getattr(cfg, key), float):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"{key} must be a number")
            coerced[key] = float(val)
        else:
            if not isinstance(val, str):
                raise ConfigError(f"{key} must be a string")
            coerced[key] = val
    return dataclasses.replace(cfg, **coerced)
