"""Flat ``key = value`` configuration with layered resolution.

Precedence, lowest first: built-in defaults, preset, config file, ``--set``
overrides, dedicated command-line flags.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .advantage import HyperParams
from .rng import MAX_SEED


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text: str):
    return None if text.strip().lower() in ("", "none") else int(text)


def _opt_float(text: str):
    return None if text.strip().lower() in ("", "none", "auto") else float(text)


def _floats(text: str):
    t = text.strip()
    if t.lower() in ("", "none"):
        return None
    return tuple(float(x) for x in t.replace(",", " ").split())


# key -> (parser, default)
SCHEMA: dict[str, tuple[Any, Any]] = {
    # hyperparameters
    "group_size": (int, 16),
    "step_size": (float, 0.05),
    "clip_ratio": (float, 0.2),
    "rollout_length": (int, 1),
    "vocab_size": (int, 2),
    "policy_floor": (float, 1e-6),
    # clipping-correction bound
    "activation_rate": (float, 0.001),
    "mean_abs_advantage": (_opt_float, None),
    "m_constant": (_opt_float, None),
    "m_preset": (str, "population"),
    # clipped entropy bound
    "rho": (float, 0.001),
    "delta": (float, 10.0),
    "p_threshold": (_opt_float, None),
    "pi_hat": (_opt_float, None),
    "phi_override": (_opt_float, None),
    "remainder_convention": (str, "floor"),
    # policies and simulation
    "initial_policy": (str, "two_arm"),
    "beta": (float, 0.5),
    "policy_vector": (_floats, None),
    "reward_mode": (str, "random"),
    "correct_arm": (_opt_int, None),
    "update_mode": (str, "unclipped"),
    "steps": (int, 2000),
    "groups_per_step": (int, 1),
    "record_every": (int, 1),
    "enforce_floor": (_bool, True),
    "n_seeds": (int, 1),
    # entropy-step
    "oracle_mode": (str, "unclipped"),
    # misalignment
    "n_c": (int, 12),
    "n_i": (int, 4),
    # run control
    "seed": (int, 0),
}

PRESETS: dict[str, dict[str, Any]] = {
    "cor34": {
        "group_size": 16,
        "step_size": 5e-7,
        "clip_ratio": 0.2,
        "rollout_length": 4096,
        "vocab_size": 150000,
        "policy_floor": 1e-6,
        "activation_rate": 0.001,
        "m_constant": 3.75,
    },
    "remark-entropy": {
        "group_size": 16,
        "step_size": 5e-7,
        "clip_ratio": 0.2,
        "rollout_length": 1,
        "vocab_size": 150000,
        "policy_floor": 1e-7,
        "rho": 0.001,
        "delta": 10.0,
        "p_threshold": 2e-7,
        "pi_hat": 2e-7,
        "phi_override": -2.23e6,
        "remainder_convention": "local",
    },
    "flat": {
        "group_size": 16,
        "step_size": 0.05,
        "vocab_size": 2,
        "initial_policy": "two_arm",
        "beta": 0.5,
        "steps": 2000,
        "record_every": 10,
    },
    "skewed": {
        "group_size": 16,
        "step_size": 0.05,
        "vocab_size": 2,
        "initial_policy": "two_arm",
        "beta": 0.95,
        "steps": 2000,
        "record_every": 10,
    },
}


def parse_value(key: str, text: str):
    if key not in SCHEMA:
        raise ConfigError(f"unknown key {key!r}")
    parser, _ = SCHEMA[key]
    try:
        return parser(text.strip()) if parser is not str else text.strip()
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text.strip()!r} ({exc})") from None


def parse_text(text: str, source: str = "<config>") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = parse_value(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return out


def parse_overrides(items: list[str]) -> dict[str, Any]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = parse_value(key.strip(), value)
    return out


def resolve(
    path: str | Path | None = None,
    preset: str | None = None,
    overrides: dict[str, Any] | None = None,
) -> dict[str, Any]:
    cfg = {k: default for k, (_, default) in SCHEMA.items()}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg.update(PRESETS[preset])
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg.update(parse_text(text, str(path)))
    for key, value in (overrides or {}).items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        cfg[key] = value
    validate(cfg)
    return cfg


def hyperparams(cfg: dict[str, Any]) -> HyperParams:
    try:
        return HyperParams(
            group_size=cfg["group_size"],
            step_size=cfg["step_size"],
            clip_ratio=cfg["clip_ratio"],
            rollout_length=cfg["rollout_length"],
            vocab_size=cfg["vocab_size"],
            policy_floor=cfg["policy_floor"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def validate(cfg: dict[str, Any]) -> None:
    hyperparams(cfg)
    if not 0 <= cfg["seed"] <= MAX_SEED:
        raise ConfigError(f"seed: must lie in [0, 2^64 - 1], got {cfg['seed']}")
    if cfg["n_seeds"] < 1:
        raise ConfigError("n_seeds: >= 1 required")
    if cfg["remainder_convention"] not in ("floor", "local"):
        raise ConfigError("remainder_convention: expected 'floor' or 'local'")
    if cfg["m_preset"] not in ("population", "sample"):
        raise ConfigError("m_preset: expected 'population' or 'sample'")
    if cfg["oracle_mode"] not in ("unclipped", "clipped"):
        raise ConfigError("oracle_mode: expected 'unclipped' or 'clipped'")
    if not 0 <= cfg["activation_rate"] <= 1:
        raise ConfigError("activation_rate: 0 <= p_+ <= 1 required")


@dataclass(frozen=True)
class RunManifest:
    command: str
    config: dict[str, Any]
    seed: int
    version: str
    started: str
    finished: str
    outputs: list[str]
