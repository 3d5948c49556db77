"""Hierarchical semantic correction over the four-level decoder pyramid.

Stage 3 fuses V4 with F3 and enhances; stage 2 fuses, corrects with the stage-3
similarity map, then enhances; stage 1 fuses and corrects only.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionError


def upsample2x(x):
    return F.interpolate(x, scale_factor=2.0, mode="bilinear", align_corners=False)


def cosine_map(V, c, eps=1e-8):
    """Per-pixel cosine between features V [B, C, h, w] and vectors c [B, C] -> [B, h, w].

    Pixels (or text vectors) with zero norm get similarity 0.
    """
    if V.shape[:2] != c.shape[:2]:
        raise DimensionError(f"feature width {tuple(V.shape[:2])} vs text {tuple(c.shape)}")
    dot = torch.einsum("bchw,bc->bhw", V, c)
    norms = V.norm(dim=1) * c.norm(dim=1)[:, None, None]
    s = dot / norms.clamp_min(eps)
    return s.clamp(-1.0, 1.0)


def scm(F_fused, V_next, S_next):
    """F' + Up(V_next * S_next)."""
    if V_next.shape[-2:] != S_next.shape[-2:] or V_next.shape[0] != S_next.shape[0]:
        raise DimensionError(f"V {tuple(V_next.shape)} and S {tuple(S_next.shape)} disagree")
    gated = V_next * S_next.unsqueeze(1)
    up = upsample2x(gated)
    if up.shape != F_fused.shape:
        raise DimensionError(f"corrected map {tuple(up.shape)} does not match fused features {tuple(F_fused.shape)}")
    return F_fused + up


class TextProjection(nn.Module):
    def __init__(self, text_dim, embed_dim):
        super().__init__()
        self.linear = nn.Linear(text_dim, embed_dim)

    def forward(self, x):
        return self.linear(x)


class FuseAdjacent(nn.Module):
    """Conv(Concat(Up(V_{i+1}), proj(F_i))) -> embed_dim channels."""

    def __init__(self, level_channels, embed_dim, kernel_size=3):
        super().__init__()
        self.proj = nn.Conv2d(level_channels, embed_dim, 1)
        self.conv = nn.Conv2d(2 * embed_dim, embed_dim, kernel_size, padding=kernel_size // 2)

    def forward(self, V_next, F_i):
        h, w = F_i.shape[-2:]
        if (V_next.shape[-2] * 2, V_next.shape[-1] * 2) != (h, w):
            raise DimensionError(f"cannot fuse {tuple(V_next.shape[-2:])} into {(h, w)}: need an exact 1:2 ratio")
        return self.conv(torch.cat([upsample2x(V_next), self.proj(F_i)], dim=1))


class CrossBlock(nn.Module):
    def __init__(self, dim, heads, mlp_ratio=2):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x, context):
        kv = self.norm_kv(context)
        x = x + self.attn(self.norm_q(x), kv, kv, need_weights=False)[0]
        return x + self.mlp(self.norm_mlp(x))


class SEM(nn.Module):
    """Text->image then image->text attention; returns enhanced features and similarity map."""

    def __init__(self, dim, heads):
        super().__init__()
        self.text_to_image = CrossBlock(dim, heads)
        self.image_to_text = CrossBlock(dim, heads)

    def forward(self, F_fused, text_tokens, text_vec):
        b, c, h, w = F_fused.shape
        img = F_fused.flatten(2).transpose(1, 2)
        img = self.text_to_image(img, text_tokens)
        txt = self.image_to_text(text_vec[:, None, :], img)[:, 0]
        V = img.transpose(1, 2).reshape(b, c, h, w)
        return V, cosine_map(V, txt)


class HSCM(nn.Module):
    def __init__(self, pyramid_channels, text_dim, embed_dim=256, heads=8, kernel_size=3):
        super().__init__()
        self.embed_dim = embed_dim
        self.text_proj = TextProjection(text_dim, embed_dim)
        self.proj4 = nn.Conv2d(pyramid_channels[3], embed_dim, 1)
        self.fuse = nn.ModuleDict({
            str(i): FuseAdjacent(pyramid_channels[i - 1], embed_dim, kernel_size) for i in (3, 2, 1)
        })
        self.sem = nn.ModuleDict({str(i): SEM(embed_dim, heads) for i in (3, 2)})
        self.trace = None  # set to a list to record the (stage, op) schedule

    def _log(self, stage, op):
        if self.trace is not None:
            self.trace.append((stage, op))

    def forward(self, pyramid, text):
        """pyramid: FeaturePyramid, text: TextEmbedding -> (V1, {3: S3, 2: S2})."""
        tokens = self.text_proj(text.tokens)
        text_vec = self.text_proj(text.pooled)
        V = self.proj4(pyramid[4])
        sims = {}
        S_prev = None
        for stage in (3, 2, 1):
            fused = self.fuse[str(stage)](V, pyramid[stage])
            self._log(stage, "fuse")
            if S_prev is not None:
                fused = scm(fused, V, S_prev)
                self._log(stage, "scm")
            if str(stage) in self.sem:
                V, S_prev = self.sem[str(stage)](fused, tokens, text_vec)
                sims[stage] = S_prev
                self._log(stage, "sem")
            else:
                V = fused
        return V, sims


class BaselineHead(nn.Module):
    """Ablation path without HSCM: F4 projected to the embedding width, similarity on F4."""

    def __init__(self, pyramid_channels, text_dim, embed_dim=256):
        super().__init__()
        self.text_proj = TextProjection(text_dim, embed_dim)
        self.proj4 = nn.Conv2d(pyramid_channels[3], embed_dim, 1)

    def forward(self, pyramid, text):
        V4 = self.proj4(pyramid[4])
        S4 = cosine_map(V4, self.text_proj(text.pooled))
        h, w = pyramid[1].shape[-2:]
        V = F.interpolate(V4, size=(h, w), mode="bilinear", align_corners=False)
        return V, {4: S4}
