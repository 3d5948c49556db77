from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionError, NumericError


OUTPUT_BIAS_INIT = 1e-2


class CountHead(nn.Module):
    """Spatial self-attention, three convolutions, final ReLU; output [B, H, W]."""

    def __init__(self, embed_dim=256, hidden_channels=128, attn_heads=8):
        super().__init__()
        self.norm = nn.LayerNorm(embed_dim)
        self.attn = nn.MultiheadAttention(embed_dim, attn_heads, batch_first=True)
        self.conv1 = nn.Conv2d(embed_dim, hidden_channels, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden_channels, hidden_channels // 2, 3, padding=1)
        self.conv3 = nn.Conv2d(hidden_channels // 2, 1, 1)
        # start the rectifier active but near zero; a large random output makes the
        # first updates overshoot below zero, after which the ReLU passes no gradient
        nn.init.normal_(self.conv3.weight, std=1e-3)
        nn.init.constant_(self.conv3.bias, OUTPUT_BIAS_INIT)
        self.check_finite = True

    def _check(self, name, x):
        if self.check_finite and not torch.isfinite(x).all():
            raise NumericError(f"non-finite activations after counter layer '{name}'")
        return x

    def forward(self, V1):
        b, c, h, w = V1.shape
        tokens = V1.flatten(2).transpose(1, 2)
        q = self.norm(tokens)
        tokens = tokens + self.attn(q, q, q, need_weights=False)[0]
        x = self._check("attn", tokens.transpose(1, 2).reshape(b, c, h, w))
        # smooth hidden activations cannot die; only the output is rectified
        x = self._check("conv1", F.gelu(self.conv1(x)))
        x = self._check("conv2", F.gelu(self.conv2(x)))
        return self._check("conv3", F.relu(self.conv3(x))).squeeze(1)


def integrate(D, region=None):
    """Sum of density over the last two dims, optionally restricted to a boolean/0-1 mask."""
    if region is None:
        return D.sum(dim=(-2, -1))
    region = torch.as_tensor(region, device=D.device)
    if region.shape[-2:] != D.shape[-2:]:
        raise DimensionError(f"mask {tuple(region.shape)} does not match density {tuple(D.shape)}")
    return (D * region.to(D.dtype)).sum(dim=(-2, -1))
