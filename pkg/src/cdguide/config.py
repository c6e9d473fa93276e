"""Run configuration: one JSON document with a section per stage.

Precedence: built-in defaults < config file < ``--set key=value`` < ``--seed``.
"""

import copy
import hashlib
import json
import zlib

OPT_DEFAULTS = {
    "A": 1.0,
    "B": 100.0,
    "zeta": 0.6,
    "batch_size": 1024,
    "iterations": 20000,
    "clip_norm": None,
    "adam": True,
    "beta1": 0.9,
    "beta2": 0.999,
    "adam_eps": 1e-8,
    "log_every": 100,
    "average_tail": 0.5,
}

DEFAULTS = {
    "name": "run",
    "seed": 0,
    "schedule": {"kind": "VE", "T": 10.0, "eps": 1e-8, "a": 0.1, "b": 20.0, "sigma": 25.0},
    "data": {
        "kind": "gaussian",  # gaussian | exp_log | csv
        "weights": [1.0],
        "means": [[1.0]],
        "covs": [[[4.0]]],
        "n": 100000,
        "rate": 1.0,
        "path": None,
    },
    "score": {
        "variant": "analytic",  # analytic | learned
        "hidden": [64, 64],
        "activation": "tanh",
        "weight": "noise_var",
        "optimizer": {**OPT_DEFAULTS, "batch_size": 512, "iterations": 10000, "B": 1000.0, "zeta": 1.0, "average_tail": 0.0},
    },
    "guidance_set": {"type": "box", "lower": [3.0], "upper": [None]},
    "simulate": {"K": 500, "spacing": "uniform", "eps_T": None, "n_paths": 20000},
    "h": {"hidden": [64, 64], "activation": "tanh", "eps_h": 1e-4, "optimizer": dict(OPT_DEFAULTS)},
    "q": {"hidden": [64, 64], "activation": "tanh", "mode": "increment", "optimizer": dict(OPT_DEFAULTS)},
    "sample": {
        "mode": "ML",
        "integrator": "sde",
        "eta": 1.0,
        "K": 500,
        "spacing": "uniform",
        "eps_T": None,
        "c_clip": 1e3,
        "n_paths": 10000,
    },
    "eval": {"n_reference": 100000, "w2_n": 2000, "bins": 64},
    "oracle": {"n_t": 101, "n_y": 201, "y_range": None},
    "stress": {
        "csv": None,
        "synthetic_days": 3000,
        "tickers": ["AAA", "BBB", "CCC", "DDD"],
        "winsor": 0.005,
        "N": 64,
        "k": 10,
        "m": 5,
        "tau": -0.10,
        "cond_tickers": ["DDD"],
        "eta_ml": [0.5, 1.0],
        "eta_mcl": [0.05, 0.1],
        "n_generated": 500,
    },
}

# values that are free-form documents rather than sub-sections
OPAQUE = {("guidance_set",), ("data", "weights"), ("data", "means"), ("data", "covs")}


class ConfigError(ValueError):
    pass


def _merge(base, update, path=()):
    unknown = []
    for k, v in update.items():
        p = (*path, k)
        if k not in base:
            unknown.append(".".join(p))
        elif isinstance(base[k], dict) and p not in OPAQUE:
            if not isinstance(v, dict):
                raise ConfigError(f"{'.'.join(p)} must be an object")
            unknown += _merge(base[k], v, p)
        else:
            base[k] = copy.deepcopy(v)
    return unknown


def parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve(file_cfg=None, overrides=(), seed=None):
    cfg = copy.deepcopy(DEFAULTS)
    unknown = _merge(cfg, file_cfg or {})
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, val = item.split("=", 1)
        parts = key.strip().split(".")
        node = {}
        cur = node
        for p in parts[:-1]:
            cur[p] = {}
            cur = cur[p]
        cur[parts[-1]] = parse_value(val)
        unknown += _merge(cfg, node)
    if unknown:
        raise ConfigError("unknown config keys: " + ", ".join(sorted(set(unknown))))
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def load(path, overrides=(), seed=None):
    file_cfg = {}
    if path is not None:
        try:
            with open(path) as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        if not isinstance(file_cfg, dict):
            raise ConfigError("config must be a JSON object")
    return resolve(file_cfg, overrides, seed)


def canonical(cfg):
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg):
    return hashlib.sha256(canonical(cfg).encode()).hexdigest()


def stage_seed(seed, stage):
    """Per-stage seed derived from the master seed."""
    return (int(seed) * 1_000_003 + zlib.crc32(stage.encode())) % (2**63)
