"""Plain-text key=value configuration shared by the CLI and the service.

One flat namespace with dotted section prefixes::

    # comment
    world.channel_half_width = 0.05
    world.jam_zones = (0.0, 0.05, 0.08)
    operator.kind = biased
    assist.tau_g = auto

Unknown keys are rejected.  ``dump_config`` emits a canonical rendering used
in run manifests, and parsing that rendering reproduces the same configs.
"""

from __future__ import annotations

from dataclasses import fields

from .actor import ActorConfig
from .assist import AssistConfig
from .critic import CriticConfig
from .env import ConfigError, WorldConfig
from .operators import OperatorConfig


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_float_tuple(text: str, n: int | None = None):
    items = [s for s in text.replace("(", "").replace(")", "").split(",") if s.strip()]
    out = tuple(float(s) for s in items)
    if n is not None and len(out) != n:
        raise ConfigError(f"expected {n} comma-separated numbers, got {text!r}")
    return out


def _parse_int_tuple(text: str):
    return tuple(int(s) for s in text.replace("(", "").replace(")", "").split(",") if s.strip())


def _parse_jam_zones(text: str):
    text = text.strip()
    if not text or text.lower() == "none":
        return ()
    zones = []
    for part in text.split(";"):
        part = part.strip()
        if part:
            zones.append(_parse_float_tuple(part, 3))
    return tuple(zones)


def _parse_tau_g(text: str):
    if text.strip().lower() in ("auto", "none"):
        return None
    return float(text)


_PARSERS = {
    "world": {
        "num_arms": int,
        "channel_half_width": float,
        "funnel_half_width": float,
        "goal_depth": float,
        "jam_zones": _parse_jam_zones,
        "lateral_drift_gain": float,
        "sensor_noise_std": float,
        "dt": float,
        "episode_limit": float,
        "command_max": float,
        "seed": int,
    },
    "operator": {
        "kind": str.strip,
        "noise_std": float,
        "bias_direction": lambda t: _parse_float_tuple(t, 2),
        "bias_gain": float,
        "pd_gain": float,
        "seed": int,
    },
    "assist": {
        "kappa": float,
        "tau_g": _parse_tau_g,
        "k_min": lambda t: _parse_float_tuple(t, 2),
        "k_max": lambda t: _parse_float_tuple(t, 2),
        "d0": lambda t: _parse_float_tuple(t, 2),
        "dq_max": float,
        "tau_max": float,
        "coupling": lambda t: _parse_float_tuple(t, 2),
        "dt_policy": float,
        "dt_servo": float,
        "cutoff_hz": float,
        "yield_ratio": float,
        "admittance_damping": float,
        "stale_policy_factor": float,
    },
    "critic": {
        "gamma": float,
        "alpha": float,
        "lambda_fail": float,
        "horizon": int,
        "target_period": int,
        "num_ood_samples": int,
        "learning_rate": float,
        "batch_size": int,
        "steps": int,
        "hidden": _parse_int_tuple,
        "seed": int,
    },
    "actor": {
        "lambda_anchor": float,
        "learning_rate": float,
        "batch_size": int,
        "steps": int,
        "hidden": _parse_int_tuple,
        "seed": int,
    },
}

_SECTIONS = {
    "world": WorldConfig,
    "operator": OperatorConfig,
    "assist": AssistConfig,
    "critic": CriticConfig,
    "actor": ActorConfig,
}


def parse_kv_text(text: str) -> dict:
    """Flat {dotted_key: raw_string} mapping; rejects malformed lines."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def validate_keys(mapping: dict) -> None:
    for key in mapping:
        if "." not in key:
            raise ConfigError(f"unknown key {key!r} (expected section.field)")
        section, field = key.split(".", 1)
        if section not in _PARSERS or field not in _PARSERS[section]:
            raise ConfigError(f"unknown key {key!r}")


def apply_overrides(mapping: dict, overrides) -> dict:
    out = dict(mapping)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must be KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_configs(mapping: dict) -> dict:
    """Instantiate every config section from a flat raw-string mapping."""
    validate_keys(mapping)
    kwargs: dict = {name: {} for name in _SECTIONS}
    for key, raw in mapping.items():
        section, field = key.split(".", 1)
        parser = _PARSERS[section][field]
        try:
            kwargs[section][field] = parser(raw)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"bad value for {key}: {raw!r} ({e})") from e
    configs = {}
    for name, cls in _SECTIONS.items():
        try:
            configs[name] = cls(**kwargs[name])
        except TypeError as e:
            raise ConfigError(f"invalid {name} section: {e}") from e
        if hasattr(configs[name], "validate"):
            configs[name].validate()
    return configs


def load_config_file(path, overrides=None) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        mapping = parse_kv_text(f.read())
    return build_configs(apply_overrides(mapping, overrides))


def default_configs() -> dict:
    return build_configs({})


def _format_value(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return "; ".join(_format_value(v) for v in value)
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(configs: dict) -> str:
    """Canonical rendering of resolved configs (manifest-stable)."""
    lines = []
    for section in sorted(_SECTIONS):
        cfg = configs[section]
        for f in fields(cfg):
            if f.name not in _PARSERS[section]:
                continue
            lines.append(f"{section}.{f.name} = {_format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"
