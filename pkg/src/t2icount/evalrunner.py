"""Sliding-window inference, MAE/RMSE and benchmark reports."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import LATENT_SCALE
from .data.augment import reflect_pad
from .data.density import pool_density, rasterize_density
from .errors import InputError

log = logging.getLogger(__name__)

# published numbers, shown next to local results; never recomputed here
REFERENCE_ROWS = {
    "fsc147": [("published reference", {"val": (13.78, 58.78), "test": (11.76, 97.86)})],
    "fsc147s": [("published reference", {"test": (4.69, 8.06)})],
    "carpk": [("published reference", {"test": (8.61, 13.47)})],
}
ABLATION_REFERENCE = {
    "baseline": {"fsc147 test": (14.66, 111.62), "fsc147s": (24.34, 64.74)},
    "baseline+rrc": {"fsc147 test": (14.55, 106.21), "fsc147s": (9.59, 22.25)},
    "full": {"fsc147 test": (11.76, 97.86), "fsc147s": (4.69, 8.06)},
}


def window_starts(size, window, stride):
    """Window offsets along one axis: stride steps, with the last one clamped to the border."""
    if size <= window:
        return [0]
    starts = list(range(0, size - window + 1, stride))
    if starts[-1] + window < size:
        starts.append(size - window)
    return starts


def sliding_window_maps(predict, image, prompt, window=384, stride=384):
    """Tile ``image`` [3, H, W] and average every map ``predict`` returns over overlapping windows.

    ``predict(window_image, prompt)`` returns {name: 2-D map} with each map at
    window/k resolution for some integer k >= 8 (k = 8 for densities). The image is
    reflect-padded on the right/bottom to at least one window and to a multiple
    of 8; windows step by ``stride`` with the last one clamped to the border.
    Coarser maps are repeated up to the 1/8 grid before averaging, because a
    clamped window need not start on their own grid. Every returned map covers
    ceil(H/8) x ceil(W/8) cells, padded cells dropped.
    """
    if window % LATENT_SCALE or stride % LATENT_SCALE:
        raise InputError("window and stride must be multiples of 8")
    _, h, w = image.shape
    ph = max(window, math.ceil(h / LATENT_SCALE) * LATENT_SCALE)
    pw = max(window, math.ceil(w / LATENT_SCALE) * LATENT_SCALE)
    padded = reflect_pad(image, ph, pw)
    lwin = window // LATENT_SCALE
    acc = {}
    cover = torch.zeros(ph // LATENT_SCALE, pw // LATENT_SCALE, dtype=torch.float64)
    for y in window_starts(ph, window, stride):
        for x in window_starts(pw, window, stride):
            outs = predict(padded[:, y:y + window, x:x + window], prompt)
            sl = (slice(y // LATENT_SCALE, y // LATENT_SCALE + lwin), slice(x // LATENT_SCALE, x // LATENT_SCALE + lwin))
            for name, m in outs.items():
                m = m.detach().to(torch.float64).cpu()
                r = lwin // m.shape[-1]
                if m.ndim != 2 or r * m.shape[-1] != lwin or r * m.shape[-2] != lwin:
                    raise InputError(f"map {name!r} of size {tuple(m.shape)} does not tile a {window}px window")
                if r > 1:
                    m = m.repeat_interleave(r, 0).repeat_interleave(r, 1)
                if name not in acc:
                    acc[name] = torch.zeros_like(cover)
                acc[name][sl] += m
            cover[sl] += 1
    lh, lw = math.ceil(h / LATENT_SCALE), math.ceil(w / LATENT_SCALE)
    return {name: (a / cover)[:lh, :lw].to(torch.float32) for name, a in acc.items()}


def sliding_window_predict(predict, image, prompt, window=384, stride=384):
    """Stitched density at 1/8 resolution; ``predict(window, prompt)`` returns a density map."""
    return sliding_window_maps(lambda im, p: {"density": predict(im, p)}, image, prompt, window, stride)["density"]


def coverage_map(h, w, window=384, stride=384):
    """Number of windows covering each latent cell of the padded image (as used above)."""
    ph = max(window, math.ceil(h / LATENT_SCALE) * LATENT_SCALE) // LATENT_SCALE
    pw = max(window, math.ceil(w / LATENT_SCALE) * LATENT_SCALE) // LATENT_SCALE
    lwin, ls = window // LATENT_SCALE, stride // LATENT_SCALE
    cover = torch.zeros(ph, pw, dtype=torch.long)
    for top in window_starts(ph, lwin, ls):
        for left in window_starts(pw, lwin, ls):
            cover[top:top + lwin, left:left + lwin] += 1
    return cover


def compute_metrics(pairs):
    """[(pred, gt), ...] -> (mae, rmse)."""
    pairs = list(pairs)
    if not pairs:
        raise InputError("cannot compute metrics over an empty list")
    err = np.array([p - g for p, g in pairs], dtype=np.float64)
    return float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err ** 2)))


@dataclass
class EvalResult:
    dataset: str
    prompt_mode: str
    per_image: list = field(default_factory=list)  # (image_id, pred, gt)
    failures: list = field(default_factory=list)  # (image_id, message)
    mae: float = float("nan")
    rmse: float = float("nan")
    config_hash: str = ""

    @property
    def n(self):
        return len(self.per_image)

    def summary(self):
        return {"dataset": self.dataset, "prompt_mode": self.prompt_mode, "mae": self.mae, "rmse": self.rmse,
                "n": self.n, "failures": len(self.failures), "config_hash": self.config_hash}


def model_predictor(model, window=384, stride=384):
    """Predictor over samples for a trained model, via sliding windows."""
    def predict(sample):
        return sliding_window_predict(model.density, sample.image, sample.class_name, window, stride)
    return predict


def oracle_predictor(sigma=4.0):
    """Returns the rasterised ground truth at latent resolution: a perfect counter."""
    def predict(sample):
        h, w = sample.image.shape[-2:]
        ph, pw = math.ceil(h / LATENT_SCALE) * LATENT_SCALE, math.ceil(w / LATENT_SCALE) * LATENT_SCALE
        return torch.from_numpy(pool_density(rasterize_density(sample.points, (ph, pw), sigma), LATENT_SCALE))
    return predict


def run_benchmark(predict, samples, dataset="", prompt_mode="class", config_hash=""):
    """Count every sample with ``predict(sample) -> density`` and compute MAE/RMSE.

    Per-image failures are logged and excluded; ``result.failures`` lists them.
    """
    result = EvalResult(dataset, prompt_mode, config_hash=config_hash)
    for sample in sorted(samples, key=lambda s: (s.image_id, s.class_name)):
        try:
            density = predict(sample)
            pred = float(density.sum())
            if not math.isfinite(pred):
                raise FloatingPointError("non-finite count")
        except Exception as exc:  # recorded, not fatal
            log.error("evaluation failed on %s: %s", sample.image_id, exc)
            result.failures.append((sample.image_id, str(exc)))
            continue
        result.per_image.append((sample.image_id, pred, float(sample.count)))
    if result.per_image:
        result.mae, result.rmse = compute_metrics([(p, g) for _, p, g in result.per_image])
    return result


def format_table(rows, columns):
    """rows: [(name, {column: (mae, rmse)})] -> aligned text table with MAE/RMSE per column."""
    header = ["Method"] + [f"{c} {m}" for c in columns for m in ("MAE", "RMSE")]
    body = []
    for name, vals in rows:
        line = [name]
        for c in columns:
            mae, rmse = vals.get(c, (None, None))
            line += ["-" if mae is None else f"{mae:.2f}", "-" if rmse is None else f"{rmse:.2f}"]
        body.append(line)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    fmt = lambda r: " | ".join(v.ljust(widths[i]) if i == 0 else v.rjust(widths[i]) for i, v in enumerate(r))
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt(header), sep] + [fmt(r) for r in body]) + "\n"


def write_report(result, out_dir, split="test", method="this run"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "records.jsonl", "w") as fh:
        for image_id, pred, gt in result.per_image:
            fh.write(json.dumps({"id": image_id, "pred": pred, "gt": gt, "abs_err": abs(pred - gt)}) + "\n")
    summary = result.summary()
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    rows = [(method, {split: (result.mae, result.rmse)})]
    rows += REFERENCE_ROWS.get(result.dataset, [])
    columns = [split] + sorted({c for _, v in rows[1:] for c in v} - {split})
    (out_dir / "table.txt").write_text(format_table(rows, columns))
    return summary
