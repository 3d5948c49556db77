"""Supervision signals: fused cross-attention, PNA maps and the training losses."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import DimensionError, InputError

POSITIVE, NEGATIVE, AMBIGUOUS = 1, 0, -1
DEFAULT_FUSION_WEIGHTS = (0.6, 0.3, 0.1)  # for latent/4, latent/2, latent (coarse -> fine)


def default_tau(sigma_px=4.0, factor=8):
    """Density of the latent-resolution GT kernel one sigma away from its centre.

    The pixel-space kernel of width ``sigma_px`` becomes a unit-mass Gaussian of
    width ``sigma_px / factor`` cells once sum-pooled by ``factor``.
    """
    s = sigma_px / factor
    return math.exp(-0.5) / (2.0 * math.pi * s * s)


@dataclass
class LossWeights:
    lam: float = 2.0
    gamma: float = 0.01
    tau: float = field(default_factory=default_tau)
    theta: float = 0.3
    fusion_weights: tuple = DEFAULT_FUSION_WEIGHTS

    def __post_init__(self):
        if not self.lam > 0:
            raise InputError("lambda must be positive")
        if self.gamma < 0:
            raise InputError("gamma must be non-negative")
        if not self.tau > 0:
            raise InputError("tau must be positive")
        if not 0.0 <= self.theta <= 1.0:
            raise InputError("theta must lie in [0, 1]")

    @classmethod
    def from_config(cls, cfg):
        loss = cfg["loss"]
        tau = loss["tau"]
        if tau is None:
            tau = default_tau(cfg["data"]["sigma"])
        return cls(lam=loss["lambda"], gamma=loss["gamma"], tau=tau, theta=loss["theta"],
                   fusion_weights=tuple(loss["fusion_weights"]))


def minmax_normalize(a):
    """Per-map min-max normalisation over the last two dims; constant maps become zeros."""
    flat = a.flatten(-2)
    lo = flat.min(-1, keepdim=True).values
    hi = flat.max(-1, keepdim=True).values
    span = hi - lo
    out = torch.where(span > 0, (flat - lo) / torch.where(span > 0, span, torch.ones_like(span)),
                      torch.zeros_like(flat))
    return out.view_as(a)


def fuse_attention(maps, weights=DEFAULT_FUSION_WEIGHTS, out_size=None):
    """Weighted sum of min-max normalised attention maps, upsampled to ``out_size``.

    ``maps`` is a CrossAttentionStack or a coarse->fine list of [..., h, w] tensors.
    """
    if hasattr(maps, "ordered"):
        maps = maps.ordered()
    maps = list(maps)
    if len(weights) != len(maps):
        raise DimensionError(f"{len(weights)} fusion weights for {len(maps)} attention maps")
    if out_size is None:
        out_size = tuple(maps[-1].shape[-2:])
    fused = None
    for w, a in zip(weights, maps):
        lead = a.shape[:-2]
        n = minmax_normalize(a).reshape(-1, 1, *a.shape[-2:])
        if tuple(n.shape[-2:]) != tuple(out_size):
            n = F.interpolate(n, size=out_size, mode="bilinear", align_corners=False)
        n = w * n.reshape(*lead, *out_size)
        fused = n if fused is None else fused + n
    return fused


def pna_map(density, attention, tau, theta):
    """1 where density >= tau, else 0 where attention <= theta, else -1."""
    if density.shape != attention.shape:
        raise DimensionError(f"density {tuple(density.shape)} vs attention {tuple(attention.shape)}")
    neg_or_amb = torch.where(attention <= theta, NEGATIVE, AMBIGUOUS)
    return torch.where(density >= tau, POSITIVE, neg_or_amb).to(torch.int8)


def rrc_loss(S, P, lam=2.0):
    """lam * sum_{P=1} (1 - S) + sum_{P=0} max(0, S), summed over pixels, averaged over leading dims."""
    if S.shape != P.shape:
        raise DimensionError(f"similarity {tuple(S.shape)} vs PNA {tuple(P.shape)}")
    pos = (P == POSITIVE).to(S.dtype)
    neg = (P == NEGATIVE).to(S.dtype)
    per_pixel = lam * pos * (1.0 - S) + neg * F.relu(S)
    per_map = per_pixel.flatten(-2).sum(-1)
    return per_map.mean() if per_map.ndim else per_map


def mse_count_loss(pred, gt):
    """Pixel MSE plus relative count error |sum pred - sum gt| / (sum gt + 1)."""
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {tuple(pred.shape)} vs ground truth {tuple(gt.shape)}")
    if (gt < 0).any():
        raise InputError("ground-truth density must be non-negative")
    mse = (pred - gt).pow(2).flatten(-2).mean(-1)
    gt_count = gt.flatten(-2).sum(-1)
    count = (pred.flatten(-2).sum(-1) - gt_count).abs() / (gt_count + 1.0)
    per_map = mse + count
    return per_map.mean() if per_map.ndim else per_map


def sse_count_loss(pred, gt):
    """Per-cell squared error summed over the map, plus the relative count term.

    With a mean over cells the local term is tiny next to the count term, and the
    count term alone only moves a global offset once features are normalised.
    Summing keeps a per-cell signal that teaches where objects are.
    """
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {tuple(pred.shape)} vs ground truth {tuple(gt.shape)}")
    if (gt < 0).any():
        raise InputError("ground-truth density must be non-negative")
    sse = (pred - gt).pow(2).flatten(-2).sum(-1)
    g = gt.flatten(-2).sum(-1)
    per_map = sse + (pred.flatten(-2).sum(-1) - g).abs() / (g + 1)
    return per_map.mean() if per_map.ndim else per_map


REG_LOSSES = {"mse_count": mse_count_loss, "sse_count": sse_count_loss}


def register_reg_loss(name):
    def deco(fn):
        REG_LOSSES[name] = fn
        return fn
    return deco


def reg_loss(pred, gt, kind="mse_count"):
    try:
        fn = REG_LOSSES[kind]
    except KeyError:
        raise InputError(f"unknown regression loss {kind!r}; known: {sorted(REG_LOSSES)}") from None
    return fn(pred, gt)


def combine(reg, rrc_terms, gamma):
    if gamma == 0 or not rrc_terms:
        return reg
    return reg + gamma * sum(rrc_terms)


def upsample_to(S, size):
    if tuple(S.shape[-2:]) == tuple(size):
        return S
    return F.interpolate(S.unsqueeze(1), size=size, mode="bilinear", align_corners=False).squeeze(1)


def total_loss(pred, gt, similarity_maps, stack, weights: LossWeights, reg_kind="mse_count", pna=None):
    """Regression loss + gamma * sum of per-stage RRC losses.

    ``similarity_maps`` maps stage -> [B, h, w]; each is upsampled to the GT
    resolution. The PNA map is built once and shared by every stage.
    """
    reg = reg_loss(pred, gt, reg_kind)
    diag = {"reg": float(reg.detach())}
    if weights.gamma == 0:
        diag.update(rrc=0.0, total=diag["reg"])
        return reg, diag
    size = tuple(gt.shape[-2:])
    if pna is None:
        attention = fuse_attention(stack, weights.fusion_weights, size)
        pna = pna_map(gt, attention, weights.tau, weights.theta)
    terms = []
    for stage, S in sorted(similarity_maps.items()):
        term = rrc_loss(upsample_to(S, size), pna, weights.lam)
        diag[f"rrc_s{stage}"] = float(term.detach())
        terms.append(term)
    total = combine(reg, terms, weights.gamma)
    diag["rrc"] = float(sum(t.detach() for t in terms)) if terms else 0.0
    diag["total"] = float(total.detach())
    return total, diag
