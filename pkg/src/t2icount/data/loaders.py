"""Readers for FSC-147, FSC-147-S and CARPK in their public on-disk layouts."""
from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import IngestionError, InputError
from .samples import SPLITS, CountingSample

log = logging.getLogger(__name__)

FSC147_SPLIT_SIZES = {"train": 3659, "val": 1286, "test": 1190}
FSC147S_SIZE = 196
FSC147S_MEAN_COUNT = 4.6
CARPK_TOTAL_IMAGES = 1448

FSC147_FILES = {
    "images": "images_384_VarV2",
    "annotations": "annotation_FSC147_384.json",
    "splits": "Train_Test_Val_FSC_147.json",
    "classes": "ImageClasses_FSC147.txt",
}


def _require(path):
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"missing dataset file: {path}")
    return path


def _read_json(path):
    with open(_require(path)) as fh:
        return json.load(fh)


def _clamp_points(points, size, image_id):
    h, w = size
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    inside = (pts[:, 0] >= 0) & (pts[:, 0] <= w - 1) & (pts[:, 1] >= 0) & (pts[:, 1] <= h - 1)
    if not inside.all():
        log.warning("%s: %d point(s) outside the %dx%d image, clamped", image_id, int((~inside).sum()), w, h)
        pts[:, 0] = pts[:, 0].clip(0, w - 1)
        pts[:, 1] = pts[:, 1].clip(0, h - 1)
    return pts


def _image_size(path):
    with Image.open(path) as im:
        w, h = im.size
    return h, w


def _read_classes(path):
    classes = {}
    with open(_require(path)) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            name, cls = line.split("\t", 1) if "\t" in line else line.split(None, 1)
            classes[name.strip()] = cls.strip()
    return classes


def load_fsc147(root, split, files=None, source="fsc147"):
    """Samples of one FSC-147 split, sorted by image name."""
    if split not in SPLITS:
        raise InputError(f"unknown split {split!r}; expected one of {SPLITS}")
    files = {**FSC147_FILES, **(files or {})}
    root = Path(root)
    image_dir = _require(root / files["images"])
    annotations = _read_json(root / files["annotations"])
    splits = _read_json(root / files["splits"])
    classes = _read_classes(root / files["classes"])
    samples = []
    for name in sorted(splits[split]):
        path = _require(image_dir / name)
        if name not in annotations:
            raise IngestionError(f"{root / files['annotations']}: no points for {name}")
        if name not in classes:
            raise IngestionError(f"{root / files['classes']}: no class for {name}")
        size = _image_size(path)
        pts = _clamp_points(annotations[name]["points"], size, name)
        samples.append(CountingSample(name, classes[name], pts, split, source, path=path, size=size))
    expected = FSC147_SPLIT_SIZES[split] if source == "fsc147" else None
    if expected is not None and len(samples) != expected:
        log.warning("FSC-147 %s split has %d images, the public release has %d", split, len(samples), expected)
    return samples


def load_fsc147s(file, fsc147_root, files=None):
    """Minority-class records: JSON array of {image_id, minority_class, points}."""
    file = _require(file)
    text = file.read_text().strip()
    records = json.loads(text) if text else []
    if not records:
        log.warning("%s holds no minority annotations", file)
        return []
    files = {**FSC147_FILES, **(files or {})}
    image_dir = Path(fsc147_root) / files["images"]
    samples = []
    for rec in sorted(records, key=lambda r: r["image_id"]):
        image_id = rec["image_id"]
        path = image_dir / image_id
        if not path.exists():
            raise IngestionError(f"{file}: image {image_id} not found under {image_dir}")
        if not rec.get("points"):
            raise IngestionError(f"{file}: record {image_id} has no points")
        size = _image_size(path)
        pts = _clamp_points(rec["points"], size, image_id)
        samples.append(CountingSample(image_id, rec["minority_class"], pts, "test", "fsc147s", path=path,
                                      size=size, meta={"minority": True}))
    return samples


def box_centers(boxes):
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.stack([(b[:, 0] + b[:, 2]) / 2.0, (b[:, 1] + b[:, 3]) / 2.0], axis=1)


def _carpk_data_dir(root):
    root = Path(root)
    for cand in (root, root / "data", root / "CARPK_devkit" / "data"):
        if (cand / "Images").is_dir():
            return cand
    raise IngestionError(f"no CARPK Images/ directory under {root}")


def load_carpk(root, split="test"):
    """CARPK images with box annotations turned into centre points; class is always 'cars'."""
    data = _carpk_data_dir(root)
    if split == "all":
        return load_carpk(root, "train") + load_carpk(root, "test")
    if split not in ("train", "test"):
        raise InputError(f"unknown CARPK split {split!r}")
    names = [n.strip() for n in _require(data / "ImageSets" / f"{split}.txt").read_text().split() if n.strip()]
    samples = []
    for name in sorted(names):
        path = _require(data / "Images" / f"{name}.png")
        boxes = []
        ann = _require(data / "Annotations" / f"{name}.txt")
        for lineno, line in enumerate(ann.read_text().splitlines(), 1):
            parts = line.split()
            if not parts:
                continue
            try:
                x1, y1, x2, y2 = (float(v) for v in parts[:4])
            except ValueError:
                log.warning("%s:%d malformed box %r, skipped", ann, lineno, line)
                continue
            if x2 < x1 or y2 < y1:
                log.warning("%s:%d malformed box %r, skipped", ann, lineno, line)
                continue
            boxes.append((x1, y1, x2, y2))
        size = _image_size(path)
        pts = _clamp_points(box_centers(boxes), size, name)
        samples.append(CountingSample(name, "cars", pts, split, "carpk", path=path, size=size))
    return samples
