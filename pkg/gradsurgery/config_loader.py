#!/usr/bin/env python3
"""
Runtime configuration for gradsurgery.

A single YAML file is loaded (if present), otherwise defaults are used.
Environment variables override the file; CLI flags override both.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Mapping, Optional

from .errors import ConfigError

ENV_OVERRIDES = {
    "GRADSURGERY_OUT_DIR": ("output", "dir", str),
    "GRADSURGERY_WORKERS": ("runner", "workers", int),
    "GRADSURGERY_LOG_LEVEL": ("logging", "level", str),
}


def default_config() -> dict[str, Any]:
    """Return the default configuration."""
    return {
        "output": {
            "dir": "runs",
            # Trials per method that get a traj_<method>_<trial>.csv
            "trajectory_trials": 5,
        },
        "runner": {
            "workers": 1,
            # false writes wall-clock columns as 0 so reruns are byte-identical
            "record_timing": True,
            "keep_every": 10,
        },
        "verify": {"samples": 1_000_000, "seed": 2020},
        "oracle": {"lo": -10.0, "hi": 10.0, "step": 1e-4},
        "logging": {
            "level": "INFO",
            "format": "%(asctime)s %(levelname)s %(name)s: %(message)s",
        },
    }


def _deep_merge(base: dict, override: dict) -> dict:
    """Deep merge override into base (override wins)."""
    out = dict(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def find_config_path(repo_root: Path) -> Path | None:
    """
    Find a config file.

    Order matters:
    1) <repo_root>/.gradsurgery/config.yaml  (per-checkout override)
    2) <repo_root>/config.yaml
    """
    candidates = [
        repo_root / ".gradsurgery" / "config.yaml",
        repo_root / "config.yaml",
    ]
    for p in candidates:
        if p.exists():
            return p
    return None


def apply_env_overrides(cfg: dict[str, Any], environ: Optional[Mapping[str, str]] = None) -> dict[str, Any]:
    environ = os.environ if environ is None else environ
    out = cfg
    for var, (section, key, cast) in ENV_OVERRIDES.items():
        raw = environ.get(var)
        if raw is None or raw == "":
            continue
        try:
            value = cast(raw)
        except ValueError as e:
            raise ConfigError(f"{var}={raw!r} is not a valid {cast.__name__}") from e
        out = _deep_merge(out, {section: {key: value}})
    return out


def load_config(repo_root: Path, environ: Optional[Mapping[str, str]] = None) -> dict[str, Any]:
    """Load YAML config if present, else return defaults; then apply environment overrides."""
    import yaml

    cfg = default_config()

    path = find_config_path(repo_root)
    if path:
        loaded = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"Config at {path} must be a YAML mapping/object.")
        cfg = _deep_merge(cfg, loaded)
        cfg["_config_path"] = str(path)

    cfg = apply_env_overrides(cfg, environ)
    if int(cfg["runner"]["workers"]) < 1:
        raise ConfigError(f"runner.workers must be >= 1, got {cfg['runner']['workers']}")
    return cfg
