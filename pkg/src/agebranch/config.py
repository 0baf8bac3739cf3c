"""Run configuration: named presets, YAML/JSON files and their merge.

A configuration is one mapping.  Top-level keys:

``rate``
    ``"trial"`` (alias ``"paper-trial"``), ``"constant b=0.4"``, or a mapping
    ``{"pieces": [...]}``; see :func:`agebranch.rates.rate_from_spec`.
``offspring``
    ``"binary"``, an integer ``k`` (always ``k`` children),
    ``{"m": k}`` or ``{"probs": {2: 0.5, 3: 0.5}}``.
``seed``
    Integer master seed (default 0).
``simulate``, ``estimate``, ``verify``, ``experiment``
    Per-subcommand sections; defaults are in :data:`DEFAULTS`.

Values given later win: defaults, then ``--preset``, then ``--config``,
then ``--seed``.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

import numpy as np
import yaml

from .offspring import offspring_from_spec
from .rates import TRIAL_PRESETS, rate_from_spec


class ConfigError(ValueError):
    """Malformed or inconsistent configuration (reported as a usage error)."""


DEFAULTS: dict = {
    "rate": "trial",
    "offspring": "binary",
    "seed": 0,
    "simulate": {"T": 13.0, "n_trees": 1, "cap": 10_000_000},
    "estimate": {
        "T": 13.0,
        "input": None,
        "kernel": "gaussian",
        "bandwidth": "rule-of-thumb",
        "beta": 1.0,
        "grid": {"start": 0.25, "stop": 2.5, "step": 0.01},
    },
    "verify": {
        "identities": ["boundary", "interior", "forks", "lineage", "alive_pairs", "coupling"],
        "T": None,  # None: horizon where the expected population is about target_population
        "target_population": 1000,
        "n_trees": 2000,
        "n_paths": 200_000,
        "time_nodes": 257,
        "g": "one",
        "coupling": {"x0": 0.0, "t_max": 5.0, "points": 10, "n_pairs": 100_000},
    },
    "experiment": {
        "horizons": [11.0, 13.0, 15.0],
        "replicates": 50,
        "grid": {"start": 0.25, "stop": 2.5, "step": 0.01},
        "kernel": "gaussian",
        "bandwidth": "rule-of-thumb",
        "beta": 1.0,
        "band_level": 0.95,
        "bootstrap": 1000,
        "cap": 10_000_000,
    },
}

_TRIAL = {"rate": "trial", "offspring": "binary"}

PRESETS: dict[str, dict] = {
    **{name: dict(_TRIAL) for name in TRIAL_PRESETS},
    "desk": {**_TRIAL, "experiment": {"horizons": [11.0, 13.0, 15.0], "replicates": 50}},
    "error-table": {**_TRIAL, "experiment": {"horizons": [13.0, 15.0], "replicates": 50}},
    "regression": {**_TRIAL, "experiment": {"horizons": [11.0, 13.0, 15.0, 17.0], "replicates": 50}},
    "full": {
        **_TRIAL,
        "experiment": {"horizons": [13.0, 15.0, 17.0, 19.0, 21.0, 23.0], "replicates": 100},
    },
}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def preset(name: str) -> dict:
    """Named preset, or a ``"constant b=<b> m=<k>"`` string."""
    words = name.split()
    if words and words[0] == "constant":
        params = dict(w.split("=", 1) for w in words[1:] if "=" in w)
        if "b" not in params:
            raise ConfigError("constant preset needs b=<rate>")
        out = {"rate": {"preset": "constant", "b": float(params["b"])}}
        if "m" in params:
            out["offspring"] = {"m": int(params["m"])}
        return out
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)} or 'constant b=.. m=..'")
    return copy.deepcopy(PRESETS[name])


def load_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def resolve(preset_name: str | None = None, path: str | Path | None = None, seed: int | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if preset_name:
        cfg = deep_merge(cfg, preset(preset_name))
    if path:
        cfg = deep_merge(cfg, load_file(path))
    if seed is not None:
        cfg["seed"] = int(seed)
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    try:
        rate_from_spec(cfg["rate"])
        offspring_from_spec(cfg["offspring"])
        named_function(cfg["verify"]["g"])
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")


def dump(cfg: dict, path: str | Path) -> None:
    """Write the effective configuration; loading it back reproduces the run."""
    Path(path).write_text(yaml.safe_dump(cfg, sort_keys=True))


# --------------------------------------------------------------------------
# test functions for the verification subcommand


def named_function(spec):
    """``"one"``, ``"zero"``, ``"identity"`` or ``{"indicator_le": a}``."""
    if spec == "one":
        return lambda a: np.ones_like(np.asarray(a, dtype=float))
    if spec == "zero":
        return lambda a: np.zeros_like(np.asarray(a, dtype=float))
    if spec == "identity":
        return lambda a: np.asarray(a, dtype=float)
    if isinstance(spec, dict) and set(spec) == {"indicator_le"}:
        level = float(spec["indicator_le"])
        return lambda a: (np.asarray(a, dtype=float) <= level).astype(float)
    raise ValueError(f"unknown test function {spec!r}")
