from __future__ import annotations

import math

import numpy as np

from ..errors import DimensionError


def _axis_kernel(center, size, sigma, radius):
    lo = max(0, int(math.floor(center - radius)))
    hi = min(size, int(math.ceil(center + radius)) + 1)
    idx = np.arange(lo, hi, dtype=np.float64)
    return lo, np.exp(-0.5 * ((idx - center) / sigma) ** 2)


def rasterize_density(points, out_shape, sigma=4.0, truncate=4.0):
    """Sum of unit-mass Gaussians centred at ``points`` ((x, y) pixel coordinates).

    Pixel (r, c) is centred at coordinate (x=c, y=r). Each kernel is cut at
    ``truncate * sigma`` and at the image border, then renormalised to mass 1.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    h, w = out_shape
    D = np.zeros((h, w), dtype=np.float64)
    radius = truncate * sigma
    for x, y in np.asarray(points, dtype=np.float64).reshape(-1, 2):
        x = min(max(x, 0.0), w - 1.0)
        y = min(max(y, 0.0), h - 1.0)
        c0, kx = _axis_kernel(x, w, sigma, radius)
        r0, ky = _axis_kernel(y, h, sigma, radius)
        k = np.outer(ky, kx)
        D[r0:r0 + len(ky), c0:c0 + len(kx)] += k / k.sum()
    return D


def pool_density(D, factor):
    """Non-overlapping sum pooling; works on numpy arrays and torch tensors (last two dims)."""
    h, w = D.shape[-2:]
    if h % factor or w % factor:
        raise DimensionError(f"density of size {h}x{w} is not divisible by {factor}")
    lead = tuple(D.shape[:-2])
    n = len(lead)
    return D.reshape(*lead, h // factor, factor, w // factor, factor).sum((n + 1, n + 3))
