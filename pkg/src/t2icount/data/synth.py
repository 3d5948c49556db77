"""Synthetic two-class counting corpus: filled discs ("dots") and outlined squares ("boxes").

Every image holds a majority class and a minority class (roughly ten times
fewer instances), mimicking the minority-prompt evaluation setting.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .samples import CountingSample, to_pil

CLASSES = ("dots", "boxes")


@dataclass
class SynthImage:
    image_id: str
    image: torch.Tensor
    points: dict  # class name -> [N, 2]
    majority: str
    split: str

    @property
    def minority(self):
        return CLASSES[1] if self.majority == CLASSES[0] else CLASSES[0]

    def sample(self, class_name):
        return CountingSample(self.image_id, class_name, self.points[class_name], self.split, "synth",
                              image_tensor=self.image, size=tuple(self.image.shape[-2:]),
                              meta={"minority": class_name == self.minority,
                                    "other_count": len(self.points[self._other(class_name)])})

    def _other(self, class_name):
        return CLASSES[1] if class_name == CLASSES[0] else CLASSES[0]


def _place(rng, n, size, margin, min_dist, taken):
    out = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 20000:
            raise RuntimeError(f"could not place {n} objects on a {size}px canvas")
        p = rng.uniform(margin, size - 1 - margin, size=2)
        if all(np.hypot(*(p - q)) >= min_dist for q in taken):
            taken.append(p)
            out.append(p)
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _disc_mask(size, center, radius):
    yy, xx = np.mgrid[0:size, 0:size]
    return (xx - center[0]) ** 2 + (yy - center[1]) ** 2 <= radius ** 2


def _box_mask(size, center, half, width=1.5):
    yy, xx = np.mgrid[0:size, 0:size]
    dx, dy = np.abs(xx - center[0]), np.abs(yy - center[1])
    outer = (dx <= half) & (dy <= half)
    inner = (dx <= half - width) & (dy <= half - width)
    return outer & ~inner


def render(size, points, object_size, rng):
    """Image [3, size, size] plus a per-pixel label map (0 background, 1 dots, 2 boxes)."""
    img = 0.1 + 0.05 * rng.standard_normal((size, size, 3))
    labels = np.zeros((size, size), dtype=np.uint8)
    half = object_size / 2.0
    for k, cls in enumerate(CLASSES, start=1):
        for p in points[cls]:
            mask = _disc_mask(size, p, half - 0.5) if cls == "dots" else _box_mask(size, p, half - 0.5)
            img[mask] = rng.uniform(0.5, 1.0, size=3)
            labels[mask] = k
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return torch.from_numpy(img).permute(2, 0, 1).contiguous(), labels


def make_image(rng, image_id, split, size=128, object_size=8, minority_range=(1, 5), majority_range=(20, 40)):
    majority = CLASSES[int(rng.integers(0, 2))]
    minority = CLASSES[1] if majority == CLASSES[0] else CLASSES[0]
    n_min = int(rng.integers(minority_range[0], minority_range[1] + 1))
    n_maj = int(rng.integers(majority_range[0], majority_range[1] + 1))
    taken = []
    margin = object_size / 2.0 + 1
    min_dist = object_size + 2.0
    points = {majority: _place(rng, n_maj, size, margin, min_dist, taken),
              minority: _place(rng, n_min, size, margin, min_dist, taken)}
    image, _ = render(size, points, object_size, rng)
    return SynthImage(image_id, image, points, majority, split)


def synth_dataset(cfg, seed=None):
    """Deterministic corpus {split: [SynthImage]} from the ``data.synth`` config section."""
    seed = cfg.get("seed", 0) if seed is None else seed
    out = {}
    for k, split in enumerate(("train", "val", "test")):
        n = cfg[f"n_{split}"]
        rng = np.random.default_rng([seed, k])
        out[split] = [
            make_image(rng, f"{split}_{i:05d}", split, cfg["image_size"], cfg["object_size"],
                       tuple(cfg["minority_range"]), tuple(cfg["majority_range"]))
            for i in range(n)
        ]
    return out


def as_samples(images, which="both"):
    """Counting samples for ``which`` in {both, minority, majority}."""
    out = []
    for im in images:
        if which in ("both", "majority"):
            out.append(im.sample(im.majority))
        if which in ("both", "minority"):
            out.append(im.sample(im.minority))
    return out


def write_corpus(corpus, root):
    """Write images plus FSC-147-style files; minority annotations go to a FSC-147-S style file."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    annotations, splits, classes, minority = {}, {}, [], []
    for split, images in corpus.items():
        splits[split] = []
        for im in images:
            name = f"{im.image_id}.png"
            to_pil(im.image).save(root / "images" / name)
            annotations[name] = {"points": im.points[im.majority].tolist()}
            classes.append(f"{name}\t{im.majority}")
            splits[split].append(name)
            minority.append({"image_id": name, "minority_class": im.minority,
                             "points": im.points[im.minority].tolist()})
    (root / "annotations.json").write_text(json.dumps(annotations))
    (root / "splits.json").write_text(json.dumps(splits))
    (root / "classes.txt").write_text("\n".join(classes) + "\n")
    (root / "minority.json").write_text(json.dumps(minority))
    return root


SYNTH_FILES = {"images": "images", "annotations": "annotations.json", "splits": "splits.json",
               "classes": "classes.txt"}
