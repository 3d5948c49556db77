"""Stable Diffusion v1.5 backbone (VAE encoder + CLIP text encoder frozen, U-Net trainable).

Needs ``diffusers`` and ``transformers`` plus the pretrained weights; both are
imported lazily so the rest of the package works without them.
"""
from __future__ import annotations

import torch

from ..errors import ConfigError
from .base import (ATTENTION_DIVISORS, Backbone, CrossAttentionStack, FeaturePyramid,
                   TextEmbedding, class_token_average, freeze)


class _StoreCrossAttention:
    """Attention processor that keeps head-averaged cross-attention probabilities."""

    def __init__(self, store, key):
        self.store = store
        self.key = key

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, temb=None, **kwargs):
        is_cross = encoder_hidden_states is not None
        context = encoder_hidden_states if is_cross else hidden_states
        b = hidden_states.shape[0]
        query = attn.head_to_batch_dim(attn.to_q(hidden_states))
        key = attn.head_to_batch_dim(attn.to_k(context))
        value = attn.head_to_batch_dim(attn.to_v(context))
        probs = attn.get_attention_scores(query, key, attention_mask)
        if is_cross:
            self.store.setdefault(self.key, []).append(probs.view(b, attn.heads, *probs.shape[1:]).mean(1))
        out = attn.batch_to_head_dim(torch.bmm(probs, value))
        out = attn.to_out[1](attn.to_out[0](out))
        if attn.residual_connection:
            out = out + hidden_states
        return out / attn.rescale_output_factor


class StableDiffusionBackbone(Backbone):
    kind = "real"

    def __init__(self, model_id="runwayml/stable-diffusion-v1-5", timestep=1, seed=0, schedule=None, **_):
        super().__init__(timestep=timestep, seed=seed, schedule=schedule)
        try:
            from diffusers import AutoencoderKL, UNet2DConditionModel
            from transformers import CLIPTextModel, CLIPTokenizer
        except ImportError as exc:  # pragma: no cover - depends on optional packages
            raise ConfigError("backbone.kind=real needs the 'diffusers' and 'transformers' packages") from exc
        vae = AutoencoderKL.from_pretrained(model_id, subfolder="vae")
        vae.decoder = None  # only the encoder is used
        self.vae_scale = vae.config.scaling_factor
        self.image_encoder = freeze(vae)
        self.tokenizer = CLIPTokenizer.from_pretrained(model_id, subfolder="tokenizer")
        self.text_encoder = freeze(CLIPTextModel.from_pretrained(model_id, subfolder="text_encoder"))
        self.denoiser = UNet2DConditionModel.from_pretrained(model_id, subfolder="unet")
        self._attn_store = {}
        self._feat_store = {}
        self._install_hooks()
        self.text_dim = self.text_encoder.config.hidden_size
        self.pyramid_channels = [
            self.denoiser.config.block_out_channels[0],
            self.denoiser.config.block_out_channels[1],
            self.denoiser.config.block_out_channels[2],
            self.denoiser.config.block_out_channels[3],
        ]

    def _install_hooks(self):
        unet = self.denoiser
        procs = {}
        for name in unet.attn_processors:
            if name.startswith("up_blocks") and "attn2" in name:
                block = int(name.split(".")[1])
                procs[name] = _StoreCrossAttention(self._attn_store, block)
            else:
                procs[name] = unet.attn_processors[name]
        unet.set_attn_processor(procs)
        # decoder stage outputs before each block's upsampler; up_blocks[0] has no attention
        level_of_block = {0: 4, 1: 3, 2: 2, 3: 1}
        for i, block in enumerate(unet.up_blocks):
            last = block.attentions[-1] if getattr(block, "attentions", None) else block.resnets[-1]

            def hook(_mod, _inp, out, lvl=level_of_block[i]):
                self._feat_store[lvl] = out.sample if hasattr(out, "sample") else (out[0] if isinstance(out, tuple) else out)

            last.register_forward_hook(hook)

    def _encode_image(self, images):
        # pixels arrive in [0, 1]; the VAE expects [-1, 1]; mean of the posterior, never a sample
        posterior = self.image_encoder.encode(images * 2.0 - 1.0).latent_dist
        return posterior.mean * self.vae_scale

    def _encode_text(self, prompts):
        tok = self.tokenizer(prompts, padding="max_length", max_length=self.tokenizer.model_max_length,
                             truncation=True, return_tensors="pt")
        ids = tok.input_ids.to(self.text_encoder.device)
        out = self.text_encoder(ids)
        tokens = out.last_hidden_state
        eos = tok.attention_mask.sum(1) - 1
        class_mask = torch.zeros_like(tok.attention_mask, dtype=torch.bool)
        for b, n in enumerate(eos.tolist()):
            class_mask[b, 1:n] = True
        pooled = tokens[torch.arange(len(prompts)), eos.to(tokens.device)]
        return TextEmbedding(tokens, pooled, class_mask.to(tokens.device), list(prompts))

    def _denoise(self, z_t, text):
        self._attn_store.clear()
        self._feat_store.clear()
        t = torch.full((z_t.shape[0],), self.timestep, device=z_t.device, dtype=torch.long)
        self.denoiser(z_t, t, encoder_hidden_states=text.tokens)
        levels = [self._feat_store[i] for i in (1, 2, 3, 4)]
        h, w = z_t.shape[-2:]
        maps = {}
        for block, div in zip((1, 2, 3), ATTENTION_DIVISORS):
            probs = torch.stack(self._attn_store[block]).mean(0)  # mean over layers
            maps[h // div] = class_token_average(probs, text.class_mask).view(-1, h // div, w // div)
        return FeaturePyramid(levels), CrossAttentionStack(maps)
