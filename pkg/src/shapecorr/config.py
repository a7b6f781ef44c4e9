"""Run configuration: a hierarchical YAML file with strict key validation
and dotted-path CLI overrides."""

from __future__ import annotations

import copy
import hashlib
import json

import yaml

from .geometry import AugmentParams
from .pipeline import TrainConfig

__all__ = ["ConfigError", "DEFAULTS", "load_config", "config_hash",
           "train_config_from", "augment_from"]


class ConfigError(ValueError):
    """Invalid run configuration (unknown key, bad value, missing input)."""


DEFAULTS = {
    "seed": 0,
    "output_dir": "out",
    "cache_dir": "cache",
    "inputs": {
        "shapes": [],                 # file globs, ASCII OFF/OBJ/PLY
        "synthetic": {
            "enabled": False,
            "kind": "bent_cylinder",
            "n_shapes": 6,
            "n_target": 500,
            "magnitude": 0.85,
            "seed": None,             # defaults to the run seed
        },
    },
    "split": {
        "train": [],
        "test": [],
    },
    "laplacian": {
        "k_nn": 8,
        "bandwidth": None,
    },
    "train": {
        "lr": 0.001,
        "n_iters_stage1": 150,
        "n_iters_stage2": 1200,
        "n_iters_demo": 300,
        "k": 12,
        "lam": 0.001,
        "tau": 0.07,
        "stage2_loss": "lie",
        "map_mode": "fmap",
        "patience": 100,
        "max_denoise_iters": 3000,
        "width": 32,
        "n_blocks": 4,
        "out_dim": 32,
        "log_every": 10,
        "use_augment": True,
        "augment": {
            "rotate": False,
            "scale_range": [0.9, 1.1],
            "jitter_std": 0.01,
        },
    },
    "denoise": {
        "pair": [0, 1],
        "noise": 0.5,
        "map_file": None,
    },
    "demo": {
        "pair": [0, 1],
        "noise_levels": [0.0, 0.25, 0.5, 0.75],
    },
    "eval": {
        "maps": [],
        "gt_mode": "identity",        # identity | files
        "gt_dir": None,
        "pck_thresholds": [0.5, 1.0, 2.0, 4.0, 8.0],
    },
    "fskd": {
        "nu": 0.05,
        "sigma": 0.01,
        "n_sources": 3,
        "threshold": 0.15,
        "keypoint_files": [],         # one per labeled shape, aligned with inputs
        "synthetic_keypoints": 8,     # FPS keypoints stamped on synthetic shapes
        "checkpoint": None,           # trained net; defaults to output_dir/stage2.npz
    },
}


def _check_keys(cfg, defaults, path=""):
    for key, value in cfg.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key '{path}{key}'")
        if isinstance(defaults[key], dict) and not isinstance(value, dict) \
                and value is not None:
            raise ConfigError(f"config key '{path}{key}' must be a mapping")
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            _check_keys(value, defaults[key], path=f"{path}{key}.")


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _apply_override(cfg, dotted: str) -> None:
    if "=" not in dotted:
        raise ConfigError(f"override '{dotted}' must look like key.path=value")
    path, raw = dotted.split("=", 1)
    keys = path.strip().split(".")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value '{raw}': {exc}") from exc
    node = cfg
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], dict):
            raise ConfigError(f"unknown config key '{path}'")
        node = node[key]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key '{path}'")
    node[keys[-1]] = value


def load_config(path=None, overrides=()) -> dict:
    """Read a YAML config, apply dotted overrides, and validate all keys."""
    cfg = {}
    if path is not None:
        with open(path) as f:
            cfg = yaml.safe_load(f) or {}
        if not isinstance(cfg, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    _check_keys(cfg, DEFAULTS)
    merged = _merge(DEFAULTS, cfg)
    for dotted in overrides:
        _apply_override(merged, dotted)
    if merged["seed"] is None:
        raise ConfigError("a seed is mandatory")
    return merged


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def augment_from(cfg: dict) -> AugmentParams:
    a = cfg["train"]["augment"]
    return AugmentParams(rotate=bool(a["rotate"]),
                         scale_range=tuple(a["scale_range"]),
                         jitter_std=float(a["jitter_std"]))


def train_config_from(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        lr=float(t["lr"]),
        n_iters_stage1=int(t["n_iters_stage1"]),
        n_iters_stage2=int(t["n_iters_stage2"]),
        n_iters_demo=int(t["n_iters_demo"]),
        k=int(t["k"]),
        lam=float(t["lam"]),
        tau=float(t["tau"]),
        stage2_loss=str(t["stage2_loss"]),
        map_mode=str(t["map_mode"]),
        patience=int(t["patience"]),
        max_denoise_iters=int(t["max_denoise_iters"]),
        width=int(t["width"]),
        n_blocks=int(t["n_blocks"]),
        out_dim=int(t["out_dim"]),
        log_every=int(t["log_every"]),
        use_augment=bool(t["use_augment"]),
        augment=augment_from(cfg),
        seed=int(cfg["seed"]),
    )
