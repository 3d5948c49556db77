from .base import (ATTENTION_DIVISORS, LATENT_SCALE, Backbone, CrossAttentionStack, FeaturePyramid,
                   NoiseSchedule, TextEmbedding, forward_diffuse, q_sample)
from .mock import MockBackbone
from .tiny import TinyBackbone


def build_backbone(cfg):
    """Backbone from the ``backbone`` config section."""
    kind = cfg["kind"]
    common = dict(timestep=cfg["timestep"], seed=cfg["seed"])
    if kind == "tiny":
        return TinyBackbone(cfg["latent_channels"], cfg["channels"], cfg["text_dim"], cfg["text_len"],
                            cfg["attn_heads"], **common)
    if kind == "mock":
        return MockBackbone(**common)
    if kind == "real":
        from .real import StableDiffusionBackbone
        return StableDiffusionBackbone(cfg["model_id"], **common)
    raise ValueError(f"unknown backbone kind {kind!r}")


__all__ = [
    "ATTENTION_DIVISORS", "LATENT_SCALE", "Backbone", "CrossAttentionStack", "FeaturePyramid",
    "NoiseSchedule", "TextEmbedding", "forward_diffuse", "q_sample", "MockBackbone", "TinyBackbone",
    "build_backbone",
]
