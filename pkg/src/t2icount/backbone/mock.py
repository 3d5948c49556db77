"""Deterministic pseudo-random backbone for contract and plumbing tests."""
from __future__ import annotations

import hashlib

import torch
import torch.nn as nn
import torch.nn.functional as F

from .base import (ATTENTION_DIVISORS, Backbone, CrossAttentionStack, FeaturePyramid,
                   TextEmbedding, freeze)
from .tiny import tokenize


def _digest_seed(*parts: bytes) -> int:
    h = hashlib.sha256()
    for p in parts:
        h.update(p)
    return int.from_bytes(h.digest()[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


class MockImageEncoder(nn.Module):
    def __init__(self, latent_channels=4):
        super().__init__()
        self.proj = nn.Conv2d(3, latent_channels, 1)

    def forward(self, x):
        return self.proj(F.avg_pool2d(x, 8))


class MockTextEncoder(nn.Module):
    def __init__(self, dim=32, length=8, vocab_size=1024):
        super().__init__()
        self.length = length
        self.vocab_size = vocab_size
        self.embed = nn.Embedding(vocab_size, dim)

    def forward(self, prompts):
        ids, class_mask, eos_pos = tokenize(prompts, self.length, self.vocab_size)
        tokens = self.embed(ids.to(self.embed.weight.device))
        # EOS slot summarises the prompt so that pooled vectors differ across prompts
        summary = (tokens * class_mask[..., None].to(tokens)).sum(1) / class_mask.sum(1, keepdim=True).clamp_min(1)
        idx = torch.arange(len(prompts))
        tokens = tokens.clone()
        tokens[idx, eos_pos] = tokens[idx, eos_pos] + summary
        return TextEmbedding(tokens, tokens[idx, eos_pos], class_mask.to(tokens.device), list(prompts))


class MockDenoiser(nn.Module):
    """Pyramid = seeded noise * learnable gain + learnable projection of the pooled latent."""

    def __init__(self, latent_channels, channels):
        super().__init__()
        self.channels = list(channels)
        self.gains = nn.Parameter(torch.ones(4))
        self.proj = nn.ModuleList(nn.Conv2d(latent_channels, c, 1) for c in channels)


class MockBackbone(Backbone):
    kind = "mock"

    def __init__(self, latent_channels=4, channels=(8, 16, 16, 16), text_dim=32, text_len=8,
                 timestep=1, seed=0, schedule=None, **_):
        super().__init__(timestep=timestep, seed=seed, schedule=schedule)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.image_encoder = freeze(MockImageEncoder(latent_channels))
            self.text_encoder = freeze(MockTextEncoder(text_dim, text_len))
            self.denoiser = MockDenoiser(latent_channels, channels)
        self.pyramid_channels = list(channels)
        self.text_dim = text_dim

    def _encode_image(self, images):
        return self.image_encoder(images)

    def _encode_text(self, prompts):
        return self.text_encoder(prompts)

    def _noise(self, z_t, text):
        b = z_t.shape[0]
        h, w = z_t.shape[-2:]
        noise = [[] for _ in range(4)]
        attn = {h // d: [] for d in ATTENTION_DIVISORS}
        for i in range(b):
            seed = _digest_seed(
                z_t[i].detach().cpu().numpy().tobytes(),
                text.prompts[i].encode() if text.prompts else text.pooled[i].cpu().numpy().tobytes(),
                str(self.seed).encode(),
            )
            g = torch.Generator().manual_seed(seed)
            for lvl, c in enumerate(self.pyramid_channels):
                noise[lvl].append(torch.randn(c, h >> lvl, w >> lvl, generator=g))
            for d in ATTENTION_DIVISORS:
                attn[h // d].append(torch.rand(h // d, w // d, generator=g))
        noise = [torch.stack(n).to(z_t) for n in noise]
        attn = {r: torch.stack(a).to(z_t) for r, a in attn.items()}
        return noise, attn

    def _denoise(self, z_t, text):
        noise, attn = self._noise(z_t, text)
        dn = self.denoiser
        levels = []
        for lvl in range(4):
            base = F.avg_pool2d(z_t, 2 ** lvl) if lvl else z_t
            levels.append(dn.gains[lvl] * noise[lvl] + dn.proj[lvl](base))
        return FeaturePyramid(levels), CrossAttentionStack(attn)
