"""Run configuration: TOML file + flag overrides -> one resolved dict.

The resolved config is the single source of truth for a run; its
canonical-JSON sha256 digest pairs checkpoints with the configuration
that produced them and appears in every run record.
"""

from __future__ import annotations

import sys
from pathlib import Path

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .checkpoint import config_digest

__all__ = ["DEFAULT_CONFIG", "load_config", "resolved_digest", "ConfigError"]


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG: dict = {
    "data": {
        "resolution": 32,
    },
    "schedule": {
        "kind": "linear",
        "timesteps": 1000,
        "beta_start": 1e-4,
        "beta_end": 0.02,
    },
    "codec": {
        "mode": "identity",
        "downsample_factor": 4,
        "latent_channels": 4,
        "train_steps": 2000,
        "lr": 2e-3,
        "seed": 0,
    },
    "conditioning": {
        "regime": "two_attr",
        "encoder": "hash_stub",
        "d_text": 64,
        "max_tokens": 16,
        "sidecar": "",
        "vlm_endpoint": "",
        "vlm_model": "llava",
        "vlm_timeout": 60.0,
        "vlm_retries": 2,
        "cache_dir": "",
    },
    "model": {
        "patch_size": 4,
        "d_model": 128,
        "depth": 4,
        "heads": 4,
        "hidden_mult": 4,
        "learn_variance": False,
        "init_seed": 0,
    },
    "train": {
        "batch_size": 16,
        "lr": 1e-4,
        "total_steps": 20000,
        "seed": 0,
        "checkpoint_every": 2000,
        "log_every": 100,
        "ema": False,
        "ema_decay": 0.999,
        "blas_threads": 1,
        "unconditional": False,
    },
    "sample": {
        "steps": 250,
        "batch_size": 64,
    },
    "classifier": {
        "batch_size": 64,
        "epochs": 10,
        "lr": 3e-4,
        "seed": 0,
    },
    "eval": {
        "extractor": "fine-tuned",
        "n_pairs": 1000,
        "pca_k": 2,
        "pca_sample": 1000,
        "seed": 0,
    },
}


def _coerce_like(current, raw: str, key: str):
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"cannot parse {raw!r} as bool for {key}")
    if isinstance(current, int) and not isinstance(current, bool):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"cannot parse {raw!r} as int for {key}") from None
    if isinstance(current, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"cannot parse {raw!r} as float for {key}") from None
    return raw


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> dict:
    """Merge defaults, an optional TOML file, and ``--set`` overrides.

    Overrides are ``section.key=value`` strings; unknown sections or
    keys are rejected so typos cannot silently disable options.
    """
    config = {section: dict(values) for section, values in DEFAULT_CONFIG.items()}
    if path:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        with open(path, "rb") as fh:
            try:
                loaded = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        for section, values in loaded.items():
            if section not in config:
                raise ConfigError(f"{path}: unknown config section [{section}]")
            if not isinstance(values, dict):
                raise ConfigError(f"{path}: [{section}] must be a table")
            for key, value in values.items():
                if key not in config[section]:
                    raise ConfigError(f"{path}: unknown key {section}.{key}")
                config[section][key] = value
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, raw = item.split("=", 1)
        if "." not in dotted:
            raise ConfigError(f"override key {dotted!r} must be section.key")
        section, key = dotted.split(".", 1)
        if section not in config or key not in config[section]:
            raise ConfigError(f"unknown config key {dotted!r}")
        config[section][key] = _coerce_like(config[section][key], raw, dotted)
    return config


def resolved_digest(config: dict) -> str:
    return config_digest(config).hex()
