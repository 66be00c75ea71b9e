"""Dotted ``key = value`` configuration with typed defaults.

Precedence: built-in defaults < config file < ``--set`` overrides.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Iterable, Mapping

from megan.errors import ConfigError

DEFAULTS: dict[str, Any] = {
    "model.n_generators": 5,
    "model.d_z": 32,
    "model.k_hidden": 256,
    "model.m": 100,
    "model.trunk_width": 128,
    "model.disc_width": 128,
    "data.kind": "ring",
    "data.modes": 8,
    "data.radius": 2.0,
    "data.spacing": 2.0,
    "data.sigma": 0.05,
    "train.batch_size": 64,
    "train.lambda_lb": 100.0,
    "train.tau_initial": 0.5,
    "train.tau_rate": 0.001,
    "train.tau_floor": 0.01,
    "train.lr_disc": 2e-4,
    "train.lr_gen": 2e-4,
    "train.lr_gate": 1e-4,
    "train.max_iters": 15000,
    "train.log_every": 10,
    "train.ckpt_every": 5000,
    "train.resample_per_phase": False,
    "eval.samples": 2000,
    "seed.data": 0,
    "seed.init": 1,
    "seed.gumbel": 2,
    "seed.eval": 3,
    "out.dir": "runs",
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def coerce(key: str, raw: Any) -> Any:
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}", key=key)
    kind = type(DEFAULTS[key])
    if not isinstance(raw, str):
        raw_value = raw
        if kind is float and isinstance(raw_value, int) and not isinstance(raw_value, bool):
            return float(raw_value)
        if isinstance(raw_value, kind):
            return raw_value
        raw = str(raw)
    text = raw.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key} (expected {kind.__name__})", key=key) from None


def parse_text(text: str, source: str = "<config>") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = coerce(key, value)
    return out


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, value = (part.strip() for part in item.split("=", 1))
    return key, coerce(key, value)


def seed_streams(seed: int) -> dict[str, int]:
    """Derive the per-stream seeds from one integer."""
    return {"seed.data": 4 * seed, "seed.init": 4 * seed + 1, "seed.gumbel": 4 * seed + 2, "seed.eval": 4 * seed + 3}


def resolve(
    path: str | Path | None = None,
    overrides: Iterable[str] | Mapping[str, Any] = (),
    seed: int | None = None,
) -> dict[str, Any]:
    cfg = dict(DEFAULTS)
    env_out = os.environ.get("MEGAN_OUT")
    if env_out:
        cfg["out.dir"] = env_out
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc.strerror or exc}", key=str(path)) from None
        cfg.update(parse_text(text, str(path)))
    if seed is not None:
        cfg.update(seed_streams(seed))
    if isinstance(overrides, Mapping):
        cfg.update({k: coerce(k, v) for k, v in overrides.items()})
    else:
        cfg.update(dict(parse_override(item) for item in overrides))
    validate(cfg)
    return cfg


def validate(cfg: Mapping[str, Any]) -> None:
    positive = [
        "model.n_generators", "model.d_z", "model.k_hidden", "model.m", "model.trunk_width", "model.disc_width",
        "data.radius", "data.spacing", "train.batch_size", "train.tau_initial", "train.tau_floor",
        "train.lr_disc", "train.lr_gen", "train.lr_gate", "train.log_every", "train.ckpt_every", "eval.samples",
    ]
    for key in positive:
        if not cfg[key] > 0:
            raise ConfigError(f"{key} must be positive, got {cfg[key]!r}", key=key)
    for key in ["train.lambda_lb", "train.tau_rate", "train.max_iters", "data.sigma"]:
        if cfg[key] < 0:
            raise ConfigError(f"{key} must be nonnegative, got {cfg[key]!r}", key=key)
    if cfg["eval.samples"] < 100:
        raise ConfigError("eval.samples must be at least 100", key="eval.samples")


def dump(cfg: Mapping[str, Any]) -> str:
    lines = []
    for key in DEFAULTS:
        value = cfg[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
