from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from ..errors import DimensionError, InputError

LATENT_SCALE = 8
# attention maps are harvested at latent/4, latent/2 and latent resolution (coarse -> fine)
ATTENTION_DIVISORS = (4, 2, 1)
PYRAMID_REDUCTION = 8  # F4 sits at latent/8


@dataclass
class TextEmbedding:
    """Batched text encoding.

    ``tokens`` [B, L, d_txt] feeds cross-attention, ``pooled`` [B, d_txt] is the
    end-of-sequence summary, ``class_mask`` [B, L] marks the class-name tokens.
    """

    tokens: torch.Tensor
    pooled: torch.Tensor
    class_mask: torch.Tensor
    prompts: list[str] = field(default_factory=list)

    def __len__(self):
        return self.tokens.shape[0]

    def to(self, device):
        return TextEmbedding(self.tokens.to(device), self.pooled.to(device),
                             self.class_mask.to(device), list(self.prompts))


@dataclass
class FeaturePyramid:
    levels: list[torch.Tensor]  # F1 (finest, latent resolution) .. F4

    def __post_init__(self):
        if len(self.levels) != 4:
            raise DimensionError(f"feature pyramid needs 4 levels, got {len(self.levels)}")
        h, w = self.levels[0].shape[-2:]
        for i, f in enumerate(self.levels):
            expect = (h // 2 ** i, w // 2 ** i)
            if tuple(f.shape[-2:]) != expect:
                raise DimensionError(f"pyramid level {i + 1} has spatial shape {tuple(f.shape[-2:])}, expected {expect}")

    def __getitem__(self, i):
        """1-based access: ``pyr[4]`` is the coarsest level."""
        return self.levels[i - 1]

    @property
    def channels(self):
        return [f.shape[1] for f in self.levels]


@dataclass
class CrossAttentionStack:
    # resolution (map height) -> [B, h, w]; square latents give h = w = resolution
    maps: dict[int, torch.Tensor]

    def __post_init__(self):
        for res, a in self.maps.items():
            if a.shape[-2] != res:
                raise DimensionError(f"attention map declared at {res} has shape {tuple(a.shape)}")

    @property
    def resolutions(self):
        return sorted(self.maps)

    def ordered(self):
        return [self.maps[r] for r in self.resolutions]


def stable_diffusion_schedule(num_steps=1000, beta_start=0.00085, beta_end=0.012):
    """Scaled-linear beta schedule of SD v1.x.

    Returned ``alpha_bar`` is indexed by timestep: ``alpha_bar[0] = 1`` and
    ``alpha_bar[t] = prod_{i=1..t} (1 - beta_i)``.
    """
    betas = torch.linspace(beta_start ** 0.5, beta_end ** 0.5, num_steps, dtype=torch.float64) ** 2
    alpha_bar = torch.cumprod(1.0 - betas, dim=0)
    return torch.cat([torch.ones(1, dtype=torch.float64), alpha_bar])


class NoiseSchedule:
    def __init__(self, alpha_bar=None):
        alpha_bar = stable_diffusion_schedule() if alpha_bar is None else torch.as_tensor(alpha_bar, dtype=torch.float64)
        if alpha_bar.ndim != 1 or len(alpha_bar) == 0:
            raise DimensionError("alpha_bar must be a non-empty vector")
        if not ((alpha_bar > 0) & (alpha_bar <= 1)).all():
            raise InputError("alpha_bar values must lie in (0, 1]")
        if (alpha_bar[1:] > alpha_bar[:-1]).any():
            raise InputError("alpha_bar must be non-increasing in t")
        self.alpha_bar = alpha_bar

    def __len__(self):
        return len(self.alpha_bar)

    def __getitem__(self, t):
        if not 0 <= t < len(self.alpha_bar):
            raise InputError(f"timestep {t} outside schedule of length {len(self.alpha_bar)}")
        return float(self.alpha_bar[t])


def q_sample(z0, alpha_bar, eps):
    """z_t = sqrt(abar) z0 + sqrt(1 - abar) eps for a scalar abar in [0, 1]."""
    if eps.shape != z0.shape:
        raise DimensionError(f"noise shape {tuple(eps.shape)} does not match latent {tuple(z0.shape)}")
    if alpha_bar == 1.0:
        return z0.clone()
    if alpha_bar == 0.0:
        return eps.clone()
    return alpha_bar ** 0.5 * z0 + (1.0 - alpha_bar) ** 0.5 * eps


def forward_diffuse(z0, t, schedule, eps=None, generator=None):
    """Corrupt ``z0`` to timestep ``t``; ``eps`` is drawn from ``generator`` when absent."""
    if eps is None:
        eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype, device=z0.device)
    return q_sample(z0, schedule[t], eps)


def check_image(images):
    if images.ndim == 3:
        images = images.unsqueeze(0)
    if images.ndim != 4 or images.shape[1] != 3:
        raise DimensionError(f"expected RGB images [B, 3, H, W], got {tuple(images.shape)}")
    h, w = images.shape[-2:]
    if h % LATENT_SCALE or w % LATENT_SCALE:
        raise DimensionError(f"image size {h}x{w} is not a multiple of {LATENT_SCALE}")
    if not torch.isfinite(images).all():
        raise InputError("image contains NaN or infinite values")
    return images


def check_prompts(prompts):
    if isinstance(prompts, str):
        prompts = [prompts]
    for p in prompts:
        if not isinstance(p, str) or not p.strip():
            raise InputError("prompt must be a non-empty string")
    return list(prompts)


def freeze(module: nn.Module):
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return module


def class_token_average(probs, class_mask):
    """probs [B, N, L] (already head-averaged), class_mask [B, L] -> [B, N]."""
    m = class_mask.to(probs.dtype)
    return (probs * m[:, None, :]).sum(-1) / m.sum(-1, keepdim=True).clamp_min(1.0)


class Backbone(nn.Module):
    """Frozen image/text encoders plus a trainable single-step denoiser.

    Subclasses provide ``image_encoder``, ``text_encoder`` and ``denoiser``
    modules and implement ``_encode_image``, ``_encode_text`` and ``_denoise``.
    """

    kind = "abstract"

    def __init__(self, timestep=1, seed=0, schedule=None):
        super().__init__()
        self.timestep = timestep
        self.seed = seed
        self.schedule = schedule or NoiseSchedule()

    # frozen parts must stay in eval mode whatever the caller does
    def train(self, mode=True):
        super().train(mode)
        for name in ("image_encoder", "text_encoder"):
            mod = getattr(self, name, None)
            if isinstance(mod, nn.Module):
                mod.eval()
        return self

    def frozen_parameters(self):
        for name in ("image_encoder", "text_encoder"):
            mod = getattr(self, name, None)
            if isinstance(mod, nn.Module):
                yield from mod.named_parameters(prefix=name)

    def denoiser_parameters(self):
        return self.denoiser.named_parameters(prefix="denoiser")

    @torch.no_grad()
    def encode_image(self, images):
        images = check_image(images)
        z = self._encode_image(images)
        if not torch.isfinite(z).all():
            raise InputError("image encoder produced non-finite latents")
        return z

    @torch.no_grad()
    def encode_text(self, prompts):
        return self._encode_text(check_prompts(prompts))

    def forward_diffuse(self, z0, t=None, eps=None, generator=None):
        return forward_diffuse(z0, self.timestep if t is None else t, self.schedule, eps, generator)

    def denoise_features(self, z_t, text):
        if z_t.shape[0] != len(text):
            raise DimensionError(f"batch of {z_t.shape[0]} latents but {len(text)} prompts")
        h, w = z_t.shape[-2:]
        if h % PYRAMID_REDUCTION or w % PYRAMID_REDUCTION:
            raise DimensionError(f"latent {h}x{w} cannot form a 4-level pyramid: sides must be multiples of "
                                 f"{PYRAMID_REDUCTION} (images multiples of {PYRAMID_REDUCTION * LATENT_SCALE} px)")
        return self._denoise(z_t, text)

    def make_generator(self, seed=None):
        g = torch.Generator(device="cpu")
        g.manual_seed(self.seed if seed is None else seed)
        return g

    def forward(self, images, prompts, generator=None, eps=None):
        """Image + prompt -> (pyramid, attention stack, text embedding)."""
        z0 = self.encode_image(images)
        text = self.encode_text(prompts).to(z0.device)
        if eps is None:
            eps = torch.randn(z0.shape, generator=generator or self.make_generator()).to(z0)
        zt = self.forward_diffuse(z0, eps=eps)
        pyramid, stack = self.denoise_features(zt, text)
        return pyramid, stack, text
