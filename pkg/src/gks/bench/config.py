"""Experiment configuration: TOML in, resolved TOML out, documented defaults."""

from __future__ import annotations

import math
import sys

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml


class ConfigError(Exception):
    pass


EXPERIMENTS = ("rates", "dc-impulse", "dc-outliers", "constrained")

# Default parameters; the seed makes every experiment bit-reproducible and
# must come from the config or the command line.
DEFAULTS = {
    "rates": {
        "seed": 2, "n_steps": 50, "dt": 0.2, "sigma": 0.3,
        "outlier_frac": 0.1, "outlier_factor": 100.0, "gamma": 1.0,
        "box_lo": -1.0, "box_hi": 1.0,
        "subgrad_iters": 10000, "cp_iters": 2000,
        "cp_ratio_v1": 1.0, "cp_ratio_v2": 10.0,
        "ip_eps": 1e-12, "ip_max_iters": 200,
    },
    "dc-impulse": {
        "seed": 1, "n_steps": 200, "alpha": 0.01, "sigma_e": 0.1,
        "runs": 200, "folds": 5,
        "grid_lo": 0.1, "grid_hi": 10.0, "grid_num": 20,
        "cv_eps": 1e-5, "ip_eps": 1e-8, "workers": 1,
    },
    "dc-outliers": {
        "seed": 1, "n_steps": 200, "alpha": 0.1, "sigma": 0.1,
        "sigma_d": 0.1, "outlier_factor": 100.0, "runs": 200,
        "gamma_l1": 2.0, "ip_eps": 1e-8, "workers": 1,
    },
    "constrained": {
        "seed": 0, "n_steps": 100, "dt": 2.0 * math.pi / 100.0,
        "sigma": 0.05, "outlier_frac": 0.1, "outlier_factor": 200.0,
        "kappa": 1.0, "gamma": 1.0, "ip_eps": 1e-8,
    },
}

_INT_KEYS = {"seed", "n_steps", "runs", "folds", "grid_num", "workers",
             "subgrad_iters", "cp_iters", "ip_max_iters"}


def resolve(experiment: str, overrides: dict | None = None,
            seed: int | None = None) -> dict:
    """Merge defaults with overrides; validate keys and basic ranges."""
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}; "
                          f"choose one of {', '.join(EXPERIMENTS)}")
    cfg = dict(DEFAULTS[experiment])
    for key, val in (overrides or {}).items():
        if key not in cfg:
            raise ConfigError(f"unknown config key {key!r} for {experiment}")
        cfg[key] = val
    if seed is not None:
        cfg["seed"] = seed
    for key in cfg:
        if key in _INT_KEYS:
            if cfg[key] != int(cfg[key]):
                raise ConfigError(f"{key} must be an integer")
            cfg[key] = int(cfg[key])
        else:
            cfg[key] = float(cfg[key])
    if cfg.get("n_steps", 1) < 1:
        raise ConfigError("n_steps must be >= 1")
    if cfg.get("runs", 1) < 1:
        raise ConfigError("runs must be >= 1")
    if cfg.get("seed") is None or cfg["seed"] < 0:
        raise ConfigError("a nonnegative seed is required")
    return cfg


def load_toml(path, experiment: str, seed: int | None = None) -> dict:
    """Read a config file: a table per experiment plus optional top-level keys."""
    try:
        with open(path, "rb") as fh:
            doc = _toml.load(fh)
    except FileNotFoundError as err:
        raise ConfigError(f"config file not found: {path}") from err
    except _toml.TOMLDecodeError as err:
        raise ConfigError(f"malformed TOML: {err}") from err
    table = {}
    for key, val in doc.items():
        if key == experiment or key == experiment.replace("-", "_"):
            if not isinstance(val, dict):
                raise ConfigError(f"[{key}] must be a table")
            table.update(val)
        elif not isinstance(val, dict):
            table[key] = val
    return resolve(experiment, table, seed=seed)


def dump_toml(cfg: dict, experiment: str, path):
    """Write the fully resolved config (section per experiment)."""
    with open(path, "w") as fh:
        fh.write(f"[{experiment.replace('-', '_')}]\n")
        for key in sorted(cfg):
            val = cfg[key]
            if isinstance(val, bool):
                text = "true" if val else "false"
            elif isinstance(val, int):
                text = str(val)
            else:
                text = format(float(val), ".17g")
            fh.write(f"{key} = {text}\n")
