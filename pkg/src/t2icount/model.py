from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbone import Backbone, CrossAttentionStack, build_backbone
from .counter import CountHead, integrate
from .hscm import HSCM, BaselineHead


@dataclass
class ModelOutput:
    density: torch.Tensor  # [B, H, W] at latent resolution
    similarity: dict  # stage -> [B, h, w]
    attention: CrossAttentionStack

    @property
    def count(self):
        return integrate(self.density)


class T2ICount(nn.Module):
    def __init__(self, backbone: Backbone, hscm_enabled=True, embed_dim=256, heads=8, kernel_size=3,
                 counter_hidden=128, counter_heads=8, inference_seed=0):
        super().__init__()
        self.backbone = backbone
        self.hscm_enabled = hscm_enabled
        if hscm_enabled:
            self.head = HSCM(backbone.pyramid_channels, backbone.text_dim, embed_dim, heads, kernel_size)
        else:
            self.head = BaselineHead(backbone.pyramid_channels, backbone.text_dim, embed_dim)
        self.counter = CountHead(embed_dim, counter_hidden, counter_heads)
        self.inference_seed = inference_seed

    def forward(self, images, prompts, generator=None, eps=None):
        if generator is None and eps is None:
            generator = self.backbone.make_generator(self.inference_seed)
        pyramid, stack, text = self.backbone(images, prompts, generator=generator, eps=eps)
        V1, sims = self.head(pyramid, text)
        return ModelOutput(self.counter(V1), sims, stack)

    @torch.no_grad()
    def infer(self, image, prompt):
        """Single image [3, H, W] + prompt -> ModelOutput, with the fixed inference noise."""
        was_training = self.training
        self.eval()
        device = next(self.parameters()).device
        try:
            return self(image.unsqueeze(0).to(device), [prompt])
        finally:
            self.train(was_training)

    def density(self, image, prompt):
        """Density [H/8, W/8] for one image."""
        return self.infer(image, prompt).density[0]

    def maps(self, image, prompt):
        """Density plus similarity maps (keyed ``S{stage}``) for one image."""
        out = self.infer(image, prompt)
        maps = {"density": out.density[0]}
        maps.update({f"S{k}": v[0] for k, v in out.similarity.items()})
        return maps

    def parameter_partition(self):
        """Names of (frozen, denoiser, head) parameters."""
        frozen = {n for n, _ in self.backbone.frozen_parameters()}
        denoiser = {n for n, _ in self.backbone.denoiser_parameters()}
        groups = {"frozen": [], "denoiser": [], "head": []}
        for name, _ in self.named_parameters():
            local = name[len("backbone."):] if name.startswith("backbone.") else None
            if local in frozen:
                groups["frozen"].append(name)
            elif local in denoiser:
                groups["denoiser"].append(name)
            else:
                groups["head"].append(name)
        return groups


def build_model(cfg):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg["train"]["seed"])
        backbone = build_backbone(cfg["backbone"])
        return T2ICount(
            backbone,
            hscm_enabled=cfg["hscm"]["enabled"],
            embed_dim=cfg["hscm"]["embed_dim"],
            heads=cfg["hscm"]["heads"],
            kernel_size=cfg["hscm"]["kernel_size"],
            counter_hidden=cfg["counter"]["hidden_channels"],
            counter_heads=cfg["counter"]["attn_heads"],
            inference_seed=cfg["eval"]["seed"],
        )
