"""File-emitting renderings: density / similarity overlays, fused attention, pseudo-background, PNA."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib import colormaps
from PIL import Image

from .data.samples import to_pil

PNA_GRAY = 128


def _resize(map2d, size):
    t = torch.as_tensor(map2d, dtype=torch.float32)[None, None]
    return F.interpolate(t, size=size, mode="bilinear", align_corners=False)[0, 0].numpy()


def overlay(image, map2d, vmin=None, vmax=None, alpha=0.5, cmap="jet"):
    """Blend a colour-mapped 2-D field over ``image`` [3, H, W]; the field is resized for display only."""
    h, w = image.shape[-2:]
    m = _resize(map2d, (h, w))
    lo = float(m.min()) if vmin is None else vmin
    hi = float(m.max()) if vmax is None else vmax
    norm = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
    rgb = (colormaps[cmap](np.clip(norm, 0, 1))[..., :3] * 255).astype(np.uint8)
    return Image.blend(to_pil(image), Image.fromarray(rgb), alpha)


def gray_image(map01):
    arr = (np.clip(np.asarray(map01, dtype=np.float64), 0, 1) * 255 + 0.5).astype(np.uint8)
    return Image.fromarray(arr, mode="L")


def pseudo_background(attention, theta):
    """True = foreground (attention > theta), False = background; white/black when rendered."""
    return np.asarray(attention) > theta


def pna_image(pna):
    """white = positive, black = negative, gray = ambiguous."""
    p = np.asarray(pna)
    arr = np.full(p.shape, PNA_GRAY, dtype=np.uint8)
    arr[p == 1] = 255
    arr[p == 0] = 0
    return Image.fromarray(arr, mode="L")
