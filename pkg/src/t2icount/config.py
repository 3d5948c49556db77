"""Hierarchical configuration: defaults, YAML files and ``key=value`` overrides."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError

VARIANTS = ("baseline", "baseline+rrc", "full")
BACKBONES = ("real", "mock", "tiny")

DEFAULTS: dict[str, Any] = {
    "backbone": {
        "kind": "tiny",
        "timestep": 1,
        "seed": 0,
        # tiny / mock sizes; ignored by the real backbone
        "latent_channels": 16,
        "channels": [32, 48, 64, 64],
        "text_dim": 64,
        "text_len": 8,
        "attn_heads": 4,
        # real backbone
        "model_id": "runwayml/stable-diffusion-v1-5",
    },
    "hscm": {
        "embed_dim": 256,
        "heads": 8,
        "enabled": True,
        "kernel_size": 3,
    },
    "counter": {
        "attn_heads": 8,
        "hidden_channels": 128,
    },
    "loss": {
        "lambda": 2.0,
        "gamma": 0.01,
        "tau": None,  # None -> derived from data.sigma, see supervision.default_tau
        "theta": 0.3,
        "fusion_weights": [0.6, 0.3, 0.1],
        "reg_kind": "mse_count",
    },
    "data": {
        "dataset": "synth",
        "root": None,
        "fsc147s_file": None,
        "sigma": 4.0,
        "crop_size": 384,
        "augment": True,
        "synth": {
            "image_size": 128,
            "n_train": 240,
            "n_val": 24,
            "n_test": 50,
            "minority_range": [1, 5],
            "majority_range": [20, 40],
            "object_size": 8,
            "seed": 0,
        },
    },
    "train": {
        "base_lr": 5e-5,
        "unet_lr_scale": 0.1,
        "weight_decay": 1e-4,
        "batch_size": 16,
        "epochs": 400,
        "max_steps": None,
        "seed": 0,
        "variant": "full",
        "grad_clip": 1.0,
        "val_every": 1,
        "log_every": 10,
    },
    "eval": {
        "window": 384,
        "stride": 384,
        "seed": 0,
    },
}


def deep_merge(base: dict, update: dict, path: str = "", strict: bool = True) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        full = f"{path}{key}"
        if strict and key not in out:
            raise ConfigError(f"unknown config key: {full}")
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value, full + ".", strict)
        else:
            out[key] = copy.deepcopy(value)
    return out


def get(cfg: dict, dotted: str) -> Any:
    node = cfg
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key: {dotted}")
        node = node[part]
    return node


def set_key(cfg: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = cfg
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key: {dotted}")
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"unknown config key: {dotted}")
    node[parts[-1]] = value


def apply_overrides(cfg: dict, overrides: list[str] | None) -> dict:
    cfg = copy.deepcopy(cfg)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        set_key(cfg, key.strip(), parse_value(raw))
    return cfg


def parse_value(raw: str) -> Any:
    """YAML scalar/list parsing, plus floats such as ``3e-4`` that YAML 1.1 leaves as strings."""
    value = yaml.safe_load(raw)
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            pass
    return value


def builtin_config_path(name: str) -> Path:
    return Path(__file__).parent / "configs" / f"{name}.yaml"


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> dict:
    """Defaults <- YAML file <- overrides, then validated.

    ``path`` may also name a bundled config (``toy``, ``fsc147``).
    """
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists() and builtin_config_path(str(path)).exists():
            p = builtin_config_path(str(path))
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        with open(p) as fh:
            doc = yaml.safe_load(fh) or {}
        cfg = deep_merge(cfg, doc)
    cfg = apply_overrides(cfg, overrides)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    if cfg["backbone"]["kind"] not in BACKBONES:
        raise ConfigError(f"backbone.kind must be one of {BACKBONES}")
    if cfg["train"]["variant"] not in VARIANTS:
        raise ConfigError(f"train.variant must be one of {VARIANTS}")
    loss = cfg["loss"]
    if not loss["lambda"] > 0:
        raise ConfigError("loss.lambda must be positive")
    if loss["gamma"] < 0:
        raise ConfigError("loss.gamma must be non-negative")
    if loss["tau"] is not None and not loss["tau"] > 0:
        raise ConfigError("loss.tau must be positive")
    if not 0.0 <= loss["theta"] <= 1.0:
        raise ConfigError("loss.theta must lie in [0, 1]")
    if len(loss["fusion_weights"]) != 3:
        raise ConfigError("loss.fusion_weights needs one weight per attention resolution (3)")
    tr = cfg["train"]
    for key in ("base_lr", "unet_lr_scale"):
        if not tr[key] > 0:
            raise ConfigError(f"train.{key} must be positive")
    if tr["weight_decay"] < 0:
        raise ConfigError("train.weight_decay must be non-negative")
    if cfg["hscm"]["embed_dim"] % cfg["hscm"]["heads"]:
        raise ConfigError("hscm.embed_dim must be divisible by hscm.heads")


def apply_variant(cfg: dict) -> dict:
    """Derive the model switches implied by ``train.variant``."""
    cfg = copy.deepcopy(cfg)
    variant = cfg["train"]["variant"]
    cfg["hscm"]["enabled"] = variant == "full"
    if variant == "baseline":
        cfg["loss"]["gamma"] = 0.0
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def dump(cfg: dict, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=False)
