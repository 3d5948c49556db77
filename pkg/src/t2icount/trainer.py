"""Training: parameter groups, single optimisation steps and the epoch loop."""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from .backbone import LATENT_SCALE
from .checkpoint import load_checkpoint, restore_model, save_checkpoint
from .data import as_samples, augment, load_carpk, load_fsc147, load_fsc147s, pool_density, rasterize_density, synth_dataset
from .errors import CheckpointError, ConfigError, NumericError
from .evalrunner import model_predictor, run_benchmark
from .model import build_model
from .supervision import LossWeights, total_loss

log = logging.getLogger(__name__)


def build_param_groups(model, base_lr, unet_lr_scale=0.1, weight_decay=1e-4):
    """AdamW groups: denoiser at base_lr * unet_lr_scale, heads at base_lr, frozen encoders nowhere."""
    part = model.parameter_partition()
    seen = {}
    for group, names in part.items():
        for n in names:
            if n in seen:
                raise ConfigError(f"parameter {n} assigned to both {seen[n]} and {group}")
            seen[n] = group
    params = dict(model.named_parameters())
    for n in part["frozen"]:
        if params[n].requires_grad:
            raise ConfigError(f"frozen encoder parameter {n} requires grad")
    groups = [
        {"name": "denoiser", "params": [params[n] for n in part["denoiser"] if params[n].requires_grad],
         "lr": base_lr * unet_lr_scale, "weight_decay": weight_decay},
        {"name": "head", "params": [params[n] for n in part["head"]], "lr": base_lr, "weight_decay": weight_decay},
    ]
    return [g for g in groups if g["params"]]


def build_optimizer(model, cfg):
    tr = cfg["train"]
    return torch.optim.AdamW(build_param_groups(model, tr["base_lr"], tr["unet_lr_scale"], tr["weight_decay"]))


def gt_density(sample, sigma):
    h, w = sample.image.shape[-2:]
    return pool_density(rasterize_density(sample.points, (h, w), sigma), LATENT_SCALE)


def collate(samples, sigma):
    images = torch.stack([s.image for s in samples])
    gts = torch.from_numpy(np.stack([gt_density(s, sigma) for s in samples])).float()
    return images, [s.class_name for s in samples], gts


def step_generator(seed, step):
    return torch.Generator().manual_seed(int(seed) * 1_000_003 + int(step))


def train_step(model, batch, weights, optimizer, generator=None, grad_clip=1.0, reg_kind="mse_count"):
    """One forward/backward/update; returns per-term diagnostics. Raises NumericError before updating on NaN."""
    images, prompts, gts = batch
    device = next(model.parameters()).device
    images, gts = images.to(device), gts.to(device)
    model.train()
    optimizer.zero_grad(set_to_none=True)
    out = model(images, prompts, generator=generator)
    loss, diag = total_loss(out.density, gts, out.similarity, out.attention, weights, reg_kind)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss, terms: {diag}")
    loss.backward()
    params = [p for g in optimizer.param_groups for p in g["params"]]
    norm = torch.nn.utils.clip_grad_norm_(params, grad_clip if grad_clip else float("inf"))
    diag["grad_norm"] = float(norm)
    if not math.isfinite(diag["grad_norm"]):
        optimizer.zero_grad(set_to_none=True)
        raise NumericError(f"non-finite gradient norm, terms: {diag}")
    optimizer.step()
    diag["loss"] = float(loss.detach())
    return diag


def build_datasets(cfg):
    """{'train': samples, 'val': samples} for the configured dataset."""
    data = cfg["data"]
    kind = data["dataset"]
    if kind == "synth":
        corpus = synth_dataset(data["synth"], data["synth"]["seed"])
        return {"train": as_samples(corpus["train"]), "val": as_samples(corpus["val"])}
    if kind == "fsc147":
        return {"train": load_fsc147(data["root"], "train"), "val": load_fsc147(data["root"], "val")}
    raise ConfigError(f"data.dataset={kind!r} cannot be used for training")


def eval_samples(cfg, dataset=None, split="test"):
    """(samples, prompt_mode) for an evaluation protocol."""
    data = cfg["data"]
    dataset = dataset or data["dataset"]
    if dataset == "synth":
        corpus = synth_dataset(data["synth"], data["synth"]["seed"])
        return as_samples(corpus[split], "majority"), "class"
    if dataset == "synth-minority":
        corpus = synth_dataset(data["synth"], data["synth"]["seed"])
        return as_samples(corpus[split], "minority"), "minority"
    if dataset == "fsc147":
        return load_fsc147(data["root"], split), "class"
    if dataset == "fsc147s":
        return load_fsc147s(data["fsc147s_file"], data["root"]), "minority"
    if dataset == "carpk":
        return load_carpk(data["root"], split if split in ("train", "test") else "test"), "class"
    raise ConfigError(f"unknown dataset {dataset!r}")


@dataclass
class FitResult:
    history: list = field(default_factory=list)  # per-step diagnostics
    epochs: list = field(default_factory=list)  # per-epoch records incl. val MAE
    best_mae: float = float("inf")
    best_epoch: int = -1
    steps: int = 0
    out_dir: Path | None = None
    model: object = None


def _val_mae(model, samples, cfg):
    if not samples:
        return float("nan")
    predict = model_predictor(model, cfg["eval"]["window"], cfg["eval"]["stride"])
    return run_benchmark(predict, samples).mae


def fit(cfg, datasets=None, out_dir=None, resume=True, max_steps=None, model=None, progress=None):
    """Epoch loop with per-epoch validation, best/last checkpoints and exact resume.

    All randomness is derived from (seed, epoch, index) or (seed, step), so a
    resumed run replays the same batches, augmentations and noise.
    """
    cfg = config_mod.apply_variant(cfg)
    tr = cfg["train"]
    seed = tr["seed"]
    max_steps = tr["max_steps"] if max_steps is None else max_steps
    datasets = datasets if datasets is not None else build_datasets(cfg)
    train_set, val_set = datasets["train"], datasets.get("val", [])
    weights = LossWeights.from_config(cfg)
    sigma = cfg["data"]["sigma"]
    crop = cfg["data"]["crop_size"]
    model = model if model is not None else build_model(cfg)
    optimizer = build_optimizer(model, cfg)

    out_dir = Path(out_dir) if out_dir else None
    result = FitResult(out_dir=out_dir, model=model)
    start_epoch, start_batch, step = 0, 0, 0
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        config_mod.dump(cfg, out_dir / "config.yaml")
        last = out_dir / "last.pt"
        if resume and last.exists():
            ckpt = load_checkpoint(last)
            if ckpt["config_hash"] != config_mod.config_hash(cfg):
                raise CheckpointError(f"{last} was written with a different configuration")
            restore_model(ckpt, model)
            optimizer.load_state_dict(ckpt["optimizer"])
            st = ckpt["state"]
            start_epoch, start_batch, step = st["epoch"], st["batch"], st["step"]
            result.best_mae, result.best_epoch = st["best_mae"], st["best_epoch"]
            result.epochs = st.get("epochs", [])
            log.info("resumed from %s at epoch %d step %d", last, start_epoch, step)

    def state(epoch, batch):
        return {"epoch": epoch, "batch": batch, "step": step, "seed": seed, "best_mae": result.best_mae,
                "best_epoch": result.best_epoch, "epochs": result.epochs}

    bs = tr["batch_size"]
    n_batches = max(1, len(train_set) // bs)
    t0 = time.time()
    for epoch in range(start_epoch, tr["epochs"]):
        order = np.random.default_rng([seed, epoch]).permutation(len(train_set))
        for b in range(start_batch if epoch == start_epoch else 0, n_batches):
            if max_steps is not None and step >= max_steps:
                if out_dir is not None:
                    save_checkpoint(out_dir / "last.pt", model, cfg, optimizer, state(epoch, b))
                result.steps = step
                return result
            idx = order[b * bs:(b + 1) * bs]
            batch_samples = []
            for i in idx:
                s = train_set[i]
                if cfg["data"]["augment"]:
                    s = augment(s, np.random.default_rng([seed, epoch, int(i)]), crop)
                batch_samples.append(s)
            diag = train_step(model, collate(batch_samples, sigma), weights, optimizer,
                              step_generator(seed, step), tr["grad_clip"], cfg["loss"]["reg_kind"])
            diag.update(step=step, epoch=epoch)
            result.history.append(diag)
            step += 1
            if progress is not None:
                progress(diag)
            if tr["log_every"] and step % tr["log_every"] == 0:
                log.info("epoch %d step %d loss %.4f reg %.4f rrc %.3f (%.1fs)", epoch, step, diag["loss"],
                         diag["reg"], diag["rrc"], time.time() - t0)
        record = {"epoch": epoch, "step": step}
        if val_set and tr["val_every"] and (epoch + 1) % tr["val_every"] == 0:
            record["val_mae"] = _val_mae(model, val_set, cfg)
            if record["val_mae"] < result.best_mae:
                result.best_mae, result.best_epoch = record["val_mae"], epoch
                if out_dir is not None:
                    save_checkpoint(out_dir / "best.pt", model, cfg, None, state(epoch + 1, 0))
        result.epochs.append(record)
        if out_dir is not None:
            with open(out_dir / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(record) + "\n")
            save_checkpoint(out_dir / "last.pt", model, cfg, optimizer, state(epoch + 1, 0))
    result.steps = step
    return result


def load_trained(path, overrides=None):
    """Model + effective config from a checkpoint."""
    ckpt = load_checkpoint(path)
    cfg = copy.deepcopy(ckpt["config"])
    if overrides:
        cfg = config_mod.apply_overrides(cfg, overrides)
    model = build_model(cfg)
    restore_model(ckpt, model)
    model.eval()
    return model, cfg
