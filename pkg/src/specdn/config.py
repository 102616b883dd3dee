"""Line-based ``key = value`` config files (``#`` starts a comment).

Unknown keys are rejected.  A key listed in ``repeatable`` may appear more
than once and collects a list of values.
"""

from __future__ import annotations

from dataclasses import fields

import numpy as np

from .errors import ConfigError
from .noise import NoiseConfig
from .synth import BandSpec, SynthConfig
from .train import TrainConfig


def parse_config_text(text: str, allowed, repeatable=()) -> dict:
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in allowed and key not in repeatable:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in repeatable:
            out.setdefault(key, []).append(value)
        elif key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        else:
            out[key] = value
    return out


def read_config(path, allowed, repeatable=()) -> dict:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, allowed, repeatable)


def _as_bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def as_pair(v: str) -> tuple:
    parts = v.replace(":", ",").split(",")
    if len(parts) != 2:
        raise ConfigError(f"expected 'low,high', got {v!r}")
    try:
        return float(parts[0]), float(parts[1])
    except ValueError as exc:
        raise ConfigError(f"expected 'low,high', got {v!r}") from exc


def _convert(kind, value: str):
    try:
        if kind is bool:
            return _as_bool(value)
        if kind is tuple:
            return as_pair(value)
        return kind(value)
    except ValueError as exc:
        raise ConfigError(f"bad value {value!r}: {exc}") from exc


# -- synth -----------------------------------------------------------------

SYNTH_KEYS = {
    "height": int, "width": int, "energy_min": float, "energy_max": float,
    "momentum_min": float, "momentum_max": float, "temperature": float,
    "fermi_level": float, "background_level": float, "hybridization_gap": str,
    "seed": int,
}


def parse_band(text: str) -> BandSpec:
    """``kind name=value ...`` with ``gamma`` and an optional band weight.

    The weight is ``amplitude`` (or ``intensity``); cosine bands take only ``intensity``.
    """
    tokens = text.split()
    if not tokens:
        raise ConfigError("empty band specification")
    kind, params = tokens[0], {}
    for tok in tokens[1:]:
        if "=" not in tok:
            raise ConfigError(f"band token {tok!r} is not name=value")
        name, val = tok.split("=", 1)
        params[name] = _convert(float, val)
    gamma = params.pop("gamma", None)
    if gamma is None:
        raise ConfigError("band needs gamma=<linewidth>")
    # cosine bands use "amplitude" for the dispersion, so only "intensity" weights them
    keys = ("intensity",) if kind == "cosine" else ("amplitude", "intensity")
    given = [k for k in keys if k in params]
    if len(given) > 1:
        raise ConfigError("give the band weight once, as amplitude or intensity")
    amplitude = params.pop(given[0]) if given else 1.0
    try:
        return BandSpec(kind, params, gamma, amplitude)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def synth_config_from_dict(d: dict) -> SynthConfig:
    vals = {k: _convert(SYNTH_KEYS[k], v) for k, v in d.items() if k != "band"}
    bands = [parse_band(b) for b in d.get("band", [])]
    kwargs = {}
    for key in ("height", "width", "temperature", "fermi_level", "background_level", "seed"):
        if key in vals:
            kwargs[key] = vals[key]
    if "energy_min" in vals or "energy_max" in vals:
        kwargs["energy_range"] = (vals.get("energy_min", -0.3), vals.get("energy_max", 0.1))
    if "momentum_min" in vals or "momentum_max" in vals:
        kwargs["momentum_range"] = (vals.get("momentum_min", -0.5), vals.get("momentum_max", 0.5))
    if "hybridization_gap" in vals:
        parts = vals["hybridization_gap"].replace(",", " ").split()
        if len(parts) != 3:
            raise ConfigError("hybridization_gap = <band_a> <band_b> <gap>")
        kwargs["hybridization_gap"] = (_convert(int, parts[0]), _convert(int, parts[1]),
                                       _convert(float, parts[2]))
    try:
        return SynthConfig(bands=tuple(bands), **kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_synth_config(path) -> SynthConfig:
    return synth_config_from_dict(read_config(path, SYNTH_KEYS, repeatable=("band",)))


# -- train -----------------------------------------------------------------

def _field_types(cls) -> dict:
    types = {"int": int, "float": float, "bool": bool, "str": str, "tuple": tuple}
    return {f.name: types[f.type.split()[0]] for f in fields(cls)}


TRAIN_FIELDS = _field_types(TrainConfig)
NOISE_FIELDS = {f"noise_{k}" if k == "seed" else k: v for k, v in _field_types(NoiseConfig).items()}
RUN_KEYS = {
    "depth": int, "alpha": float, "grid": int, "train_maps": int, "map_seed": int,
    "val_maps": int, "val_fan_out": int, "val_seed": int, "init_seed": int,
}
TRAIN_KEYS = {**TRAIN_FIELDS, **NOISE_FIELDS, **RUN_KEYS}


def train_settings_from_dict(d: dict):
    """Split a flat train config into ``(TrainConfig, NoiseConfig kwargs, run dict)``."""
    vals = {k: _convert(TRAIN_KEYS[k], v) for k, v in d.items()}
    tcfg = {k: v for k, v in vals.items() if k in TRAIN_FIELDS}
    ncfg = {("seed" if k == "noise_seed" else k): v for k, v in vals.items() if k in NOISE_FIELDS}
    run = {k: v for k, v in vals.items() if k in RUN_KEYS}
    try:
        return TrainConfig(**tcfg), ncfg, run
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_train_settings(path):
    return train_settings_from_dict(read_config(path, TRAIN_KEYS))


def parse_count(text: str):
    """``N`` or ``min:max``."""
    try:
        if ":" in text:
            lo, hi = (float(x) for x in text.split(":", 1))
            return lo, hi
        n = float(text)
    except ValueError as exc:
        raise ConfigError(f"bad count {text!r}") from exc
    if not np.isfinite(n) or n < 0:
        raise ConfigError("count must be finite and >= 0")
    return n
