"""Training augmentation: rescale in [1, 2], random crop, horizontal flip, colour jitter (no blur)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import DimensionError


@dataclass
class AugmentParams:
    scale: float
    top: int
    left: int
    flip: bool
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0


def reflect_pad(image, out_h, out_w):
    """Pad [C, H, W] on the right/bottom by reflection up to (out_h, out_w)."""
    c, h, w = image.shape
    if h >= out_h and w >= out_w:
        return image
    arr = np.pad(image.numpy(), ((0, 0), (0, max(0, out_h - h)), (0, max(0, out_w - w))), mode="reflect"
                 if min(h, w) > 1 else "edge")
    return torch.from_numpy(np.ascontiguousarray(arr))


def rescale(image, points, scale):
    c, h, w = image.shape
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    if (nh, nw) != (h, w):
        image = F.interpolate(image[None], size=(nh, nw), mode="bilinear", align_corners=False)[0]
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2) * np.array([nw / w, nh / h])
    return image, pts


def sample_params(image_size, rng, crop_size=384, scale_range=(1.0, 2.0), flip_p=0.5, jitter=0.2):
    h, w = image_size
    scale = float(rng.uniform(*scale_range))
    nh, nw = max(round(h * scale), crop_size), max(round(w * scale), crop_size)
    top = int(rng.integers(0, nh - crop_size + 1))
    left = int(rng.integers(0, nw - crop_size + 1))
    flip = bool(rng.random() < flip_p)
    b, c, s = (float(v) for v in rng.uniform(1 - jitter, 1 + jitter, size=3)) if jitter else (1.0, 1.0, 1.0)
    return AugmentParams(scale, top, left, flip, b, c, s)


def color_jitter(image, brightness=1.0, contrast=1.0, saturation=1.0):
    out = image * brightness
    mean = out.mean()
    out = (out - mean) * contrast + mean
    gray = (0.299 * out[0] + 0.587 * out[1] + 0.114 * out[2])[None]
    out = (out - gray) * saturation + gray
    return out.clamp(0.0, 1.0)


def apply_geometry(image, points, params, crop_size):
    image, pts = rescale(image, points, params.scale)
    image = reflect_pad(image, crop_size, crop_size)
    image = image[:, params.top:params.top + crop_size, params.left:params.left + crop_size]
    pts = pts - np.array([params.left, params.top], dtype=np.float64)
    keep = (pts[:, 0] >= 0) & (pts[:, 0] <= crop_size - 1) & (pts[:, 1] >= 0) & (pts[:, 1] <= crop_size - 1)
    pts = pts[keep]
    if params.flip:
        image = image.flip(-1)
        pts = pts.copy()
        pts[:, 0] = crop_size - 1 - pts[:, 0]
    return image, pts


def augment(sample, rng, crop_size=384, params=None):
    """Return an augmented copy of ``sample`` (image cropped to crop_size, points moved alike)."""
    if crop_size % 8:
        raise DimensionError(f"crop size {crop_size} must be a multiple of 8")
    image = sample.image
    if params is None:
        params = sample_params(tuple(image.shape[-2:]), rng, crop_size)
    image, pts = apply_geometry(image, sample.points, params, crop_size)
    image = color_jitter(image, params.brightness, params.contrast, params.saturation)
    return sample.with_image(image, pts)
