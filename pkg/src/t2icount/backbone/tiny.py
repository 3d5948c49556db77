"""Small trainable stand-in for the latent diffusion U-Net.

Same surface as the real backbone: /8 latent, four decoder stages and
text cross-attention at latent/4, latent/2 and latent resolution.
"""
from __future__ import annotations

import hashlib
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .base import (ATTENTION_DIVISORS, Backbone, CrossAttentionStack, FeaturePyramid,
                   TextEmbedding, class_token_average, freeze)

PAD, BOS, EOS = 0, 1, 2


def word_id(word, vocab_size):
    digest = hashlib.sha256(word.encode()).digest()
    return 3 + int.from_bytes(digest[:4], "little") % (vocab_size - 3)


def tokenize(prompts, length, vocab_size):
    ids = torch.full((len(prompts), length), PAD, dtype=torch.long)
    class_mask = torch.zeros(len(prompts), length, dtype=torch.bool)
    eos_pos = torch.zeros(len(prompts), dtype=torch.long)
    for b, prompt in enumerate(prompts):
        words = prompt.lower().split()[: length - 2]
        ids[b, 0] = BOS
        for j, w in enumerate(words, start=1):
            ids[b, j] = word_id(w, vocab_size)
            class_mask[b, j] = True
        ids[b, len(words) + 1] = EOS
        eos_pos[b] = len(words) + 1
    return ids, class_mask, eos_pos


class TinyImageEncoder(nn.Module):
    def __init__(self, latent_channels=16, hidden=32):
        super().__init__()
        self.conv1 = nn.Conv2d(3, hidden, 4, stride=4)
        self.conv2 = nn.Conv2d(hidden, latent_channels, 2, stride=2)

    def forward(self, x):
        z = self.conv2(F.gelu(self.conv1(x * 2.0 - 1.0)))
        # unit-variance latents, as the scaling factor gives the real VAE; without it
        # the t=1 noise is as large as the signal
        return F.group_norm(z, 1)


class TinyTextEncoder(nn.Module):
    """Hashed word embeddings followed by one causal attention layer (EOS token summarises)."""

    def __init__(self, dim=64, length=8, vocab_size=4096, heads=4):
        super().__init__()
        self.length = length
        self.vocab_size = vocab_size
        self.embed = nn.Embedding(vocab_size, dim)
        self.pos = nn.Parameter(torch.randn(length, dim) * 0.02)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm = nn.LayerNorm(dim)
        self.register_buffer("causal", torch.triu(torch.ones(length, length, dtype=torch.bool), 1), persistent=False)

    def forward(self, prompts):
        ids, class_mask, eos_pos = tokenize(prompts, self.length, self.vocab_size)
        ids = ids.to(self.embed.weight.device)
        x = self.embed(ids) + self.pos
        h, _ = self.attn(x, x, x, attn_mask=self.causal, need_weights=False)
        tokens = self.norm(x + h)
        pooled = tokens[torch.arange(len(prompts)), eos_pos.to(tokens.device)]
        return TextEmbedding(tokens, pooled, class_mask.to(tokens.device), list(prompts))


def timestep_embedding(t, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = float(t) * freqs
    return torch.cat([torch.cos(args), torch.sin(args)])


class ResBlock(nn.Module):
    def __init__(self, cin, cout, temb_dim, groups=8):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(min(groups, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Pre-norm image->text cross-attention that also returns its head-averaged probabilities."""

    def __init__(self, dim, context_dim, heads=4):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(context_dim, dim, bias=False)
        self.v = nn.Linear(context_dim, dim, bias=False)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, context):
        b, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)  # B, N, C
        q = self.q(self.norm(tokens)).view(b, h * w, self.heads, -1).transpose(1, 2)
        k = self.k(context).view(b, context.shape[1], self.heads, -1).transpose(1, 2)
        v = self.v(context).view(b, context.shape[1], self.heads, -1).transpose(1, 2)
        probs = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
        out = (probs @ v).transpose(1, 2).reshape(b, h * w, c)
        tokens = tokens + self.out(out)
        return tokens.transpose(1, 2).reshape(b, c, h, w), probs.mean(1)


class TinyUNet(nn.Module):
    def __init__(self, latent_channels=16, channels=(32, 48, 64, 64), context_dim=64, heads=4, temb_dim=64):
        super().__init__()
        c1, c2, c3, c4 = channels
        self.temb_dim = temb_dim
        self.time_mlp = nn.Sequential(nn.Linear(temb_dim, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.conv_in = nn.Conv2d(latent_channels, c1, 3, padding=1)
        self.down1 = ResBlock(c1, c1, temb_dim)
        self.pool1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.down2 = ResBlock(c2, c2, temb_dim)
        self.pool2 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.down3 = ResBlock(c3, c3, temb_dim)
        self.pool3 = nn.Conv2d(c3, c4, 3, stride=2, padding=1)
        self.mid = ResBlock(c4, c4, temb_dim)
        self.up4 = ResBlock(c4, c4, temb_dim)
        self.up3 = ResBlock(c4 + c3, c3, temb_dim)
        self.attn3 = CrossAttention(c3, context_dim, heads)
        self.up2 = ResBlock(c3 + c2, c2, temb_dim)
        self.attn2 = CrossAttention(c2, context_dim, heads)
        self.up1 = ResBlock(c2 + c1, c1, temb_dim)
        self.attn1 = CrossAttention(c1, context_dim, heads)

    def forward(self, z, t, context):
        temb = self.time_mlp(timestep_embedding(t, self.temb_dim).to(z))[None].expand(z.shape[0], -1)
        h1 = self.down1(self.conv_in(z), temb)
        h2 = self.down2(self.pool1(h1), temb)
        h3 = self.down3(self.pool2(h2), temb)
        h4 = self.mid(self.pool3(h3), temb)
        f4 = self.up4(h4, temb)
        x = self.up3(torch.cat([F.interpolate(f4, scale_factor=2.0, mode="nearest"), h3], 1), temb)
        f3, a3 = self.attn3(x, context)
        x = self.up2(torch.cat([F.interpolate(f3, scale_factor=2.0, mode="nearest"), h2], 1), temb)
        f2, a2 = self.attn2(x, context)
        x = self.up1(torch.cat([F.interpolate(f2, scale_factor=2.0, mode="nearest"), h1], 1), temb)
        f1, a1 = self.attn1(x, context)
        return [f1, f2, f3, f4], [a3, a2, a1]


class TinyBackbone(Backbone):
    kind = "tiny"

    def __init__(self, latent_channels=16, channels=(32, 48, 64, 64), text_dim=64, text_len=8,
                 attn_heads=4, timestep=1, seed=0, schedule=None):
        super().__init__(timestep=timestep, seed=seed, schedule=schedule)
        # frozen encoders play the role of pretrained weights: fixed by the backbone seed alone
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.image_encoder = freeze(TinyImageEncoder(latent_channels))
            self.text_encoder = freeze(TinyTextEncoder(text_dim, text_len, heads=min(4, attn_heads)))
        self.denoiser = TinyUNet(latent_channels, tuple(channels), text_dim, attn_heads)
        self.pyramid_channels = list(channels)
        self.text_dim = text_dim

    def _encode_image(self, images):
        return self.image_encoder(images)

    def _encode_text(self, prompts):
        return self.text_encoder(prompts)

    def _denoise(self, z_t, text):
        levels, attn = self.denoiser(z_t, self.timestep, text.tokens)
        h, w = z_t.shape[-2:]
        maps = {}
        for div, probs in zip(ATTENTION_DIVISORS, attn):
            a = class_token_average(probs, text.class_mask)
            maps[h // div] = a.view(-1, h // div, w // div)
        return FeaturePyramid(levels), CrossAttentionStack(maps)
