"""Strict JSON run configuration with defaults, file values and flag overrides."""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "schedule": {"T": 20, "beta_start": 1e-4, "beta_end": 0.02, "train_steps": None},
    "data": {"n": 1000, "seed": 0, "kind": "mixed"},
    "codec": {"epochs": 200, "hidden": 32, "latent_channels": 4, "identity": False, "batch_size": 32, "lr": 2e-3},
    "denoiser": {"steps": 4000, "batch_size": 64, "lr": 2e-3},
    "attack": {"family": "denoiser", "xi": 8 / 255, "steps": 40, "step_size": 1 / 255, "lambda": 0.5},
    "purify": {"tau": 4e-3, "K": 100, "t_hat": 10, "lr": 1e-2, "gate": True, "strided": False},
    "sweep": {"taus": [2e-3, 3e-3, 4e-3, 5e-3], "relative": True},
    "paths": {"data": None, "bundle": None, "images": None, "out": None},
}

# expected type(s) per leaf; None in a tuple means the key may be null
_TYPES: dict[str, tuple] = {
    "seed": (int,),
    "schedule.T": (int,),
    "schedule.beta_start": (float, int),
    "schedule.beta_end": (float, int),
    "schedule.train_steps": (int, None),
    "data.n": (int,),
    "data.seed": (int,),
    "data.kind": (str,),
    "codec.epochs": (int,),
    "codec.hidden": (int,),
    "codec.latent_channels": (int,),
    "codec.identity": (bool,),
    "codec.batch_size": (int,),
    "codec.lr": (float, int),
    "denoiser.steps": (int,),
    "denoiser.batch_size": (int,),
    "denoiser.lr": (float, int),
    "attack.family": (str,),
    "attack.xi": (float, int),
    "attack.steps": (int,),
    "attack.step_size": (float, int),
    "attack.lambda": (float, int),
    "purify.tau": (float, int),
    "purify.K": (int,),
    "purify.t_hat": (int,),
    "purify.lr": (float, int),
    "purify.gate": (bool,),
    "purify.strided": (bool,),
    "sweep.taus": (list,),
    "sweep.relative": (bool,),
    "paths.data": (str, None),
    "paths.bundle": (str, None),
    "paths.images": (str, None),
    "paths.out": (str, None),
}


def _check_type(key: str, value) -> None:
    allowed = _TYPES[key]
    if value is None:
        if None not in allowed:
            raise ConfigError(key, "may not be null")
        return
    types = tuple(t for t in allowed if t is not None)
    # bool is an int subclass; keep them apart
    if isinstance(value, bool) and bool not in types:
        raise ConfigError(key, f"expected {'/'.join(t.__name__ for t in types)}, got bool")
    if not isinstance(value, types):
        raise ConfigError(key, f"expected {'/'.join(t.__name__ for t in types)}, got {type(value).__name__}")


def _merge(base: dict, overlay: dict, prefix: str = "") -> None:
    for key, value in overlay.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(path, "unknown key")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(path, "expected an object")
            _merge(base[key], value, path + ".")
        else:
            _check_type(path, value)
            base[key] = float(value) if float in _TYPES[path] and isinstance(value, int) and not isinstance(value, bool) else value


def _validate(cfg: dict) -> None:
    s = cfg["schedule"]
    if s["T"] < 1:
        raise ConfigError("schedule.T", "must be >= 1")
    if not 0 < s["beta_start"] <= s["beta_end"] < 1:
        raise ConfigError("schedule.beta_start", "need 0 < beta_start <= beta_end < 1")
    if s["train_steps"] is not None and s["train_steps"] < s["T"]:
        raise ConfigError("schedule.train_steps", "must be >= T")
    if cfg["data"]["kind"] not in ("shapes", "gradients", "mixed"):
        raise ConfigError("data.kind", "must be shapes, gradients or mixed")
    if cfg["data"]["n"] < 1:
        raise ConfigError("data.n", "must be >= 1")
    a = cfg["attack"]
    if a["family"] not in ("encoder", "denoiser", "hybrid"):
        raise ConfigError("attack.family", "must be encoder, denoiser or hybrid")
    if a["xi"] < 0:
        raise ConfigError("attack.xi", "must be >= 0")
    if a["steps"] < 0:
        raise ConfigError("attack.steps", "must be >= 0")
    if a["steps"] > 0 and a["xi"] > 0 and not 0 < a["step_size"] <= a["xi"]:
        raise ConfigError("attack.step_size", "need 0 < step_size <= xi")
    if not 0 <= a["lambda"] <= 1:
        raise ConfigError("attack.lambda", "must lie in [0, 1]")
    p = cfg["purify"]
    if not p["tau"] > 0:
        raise ConfigError("purify.tau", "must be > 0")
    if p["K"] < 0:
        raise ConfigError("purify.K", "must be >= 0")
    if not 1 <= p["t_hat"] <= s["T"]:
        raise ConfigError("purify.t_hat", f"must lie in [1, {s['T']}]")
    if not p["lr"] > 0:
        raise ConfigError("purify.lr", "must be > 0")
    taus = cfg["sweep"]["taus"]
    if not taus or not all(isinstance(t, (int, float)) and not isinstance(t, bool) and t > 0 for t in taus):
        raise ConfigError("sweep.taus", "must be a non-empty list of positive numbers")


def resolve(file_cfg: dict | None = None, overrides: dict | None = None) -> dict:
    """defaults < file < overrides, validated."""
    cfg = copy.deepcopy(DEFAULTS)
    if file_cfg:
        if not isinstance(file_cfg, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        _merge(cfg, file_cfg)
    if overrides:
        _merge(cfg, overrides)
    _validate(cfg)
    return cfg


def load(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON in {path}: {exc}") from None
    return resolve(raw)


def set_path(tree: dict, dotted: str, value) -> None:
    """Put ``value`` at ``dotted`` in a nested dict, creating levels as needed."""
    *parents, leaf = dotted.split(".")
    node = tree
    for p in parents:
        node = node.setdefault(p, {})
    node[leaf] = value
