"""Self-describing checkpoints with an integrity digest and atomic writes.

File layout (``torch.save`` of a dict)::

    format   "t2icount-ckpt-v1"
    sha256   digest of ``payload``
    payload  bytes of a torch-serialised dict: model, optimizer, state,
             config, config_hash, shapes (parameter name -> shape)
"""
from __future__ import annotations

import hashlib
import io
import os
from pathlib import Path

import torch

from .config import config_hash
from .errors import CheckpointError

FORMAT = "t2icount-ckpt-v1"


def save_checkpoint(path, model, cfg, optimizer=None, state=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "state": state or {},
        "config": cfg,
        "config_hash": config_hash(cfg),
        "shapes": {k: list(v.shape) for k, v in model.state_dict().items()},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    blob = buf.getvalue()
    tmp = path.with_name(path.name + ".tmp")
    torch.save({"format": FORMAT, "sha256": hashlib.sha256(blob).hexdigest(), "payload": blob}, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        outer = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"checkpoint {path} is unreadable or corrupted: {exc}") from exc
    if not isinstance(outer, dict) or outer.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} checkpoint")
    blob = outer["payload"]
    if hashlib.sha256(blob).hexdigest() != outer["sha256"]:
        raise CheckpointError(f"checkpoint {path} failed its integrity check (digest mismatch)")
    return torch.load(io.BytesIO(blob), map_location="cpu", weights_only=False)


def restore_model(ckpt, model):
    shapes = {k: list(v.shape) for k, v in model.state_dict().items()}
    if shapes != ckpt["shapes"]:
        missing = set(shapes) ^ set(ckpt["shapes"])
        raise CheckpointError(f"checkpoint does not match the model architecture ({len(missing)} differing keys)")
    model.load_state_dict(ckpt["model"])
    return model
