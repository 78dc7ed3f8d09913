"""
Conditional latent denoiser.

The U-Net sees the noisy latent concatenated with the latent of the
conditioning render, attends from spatial positions to the semantic tokens
in its transformer blocks and, when enabled, modulates every residual block
with the identity token through AdaIN.
"""

import logging
from typing import List, Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..utils.config_loader import DiffusionConfig
from .identity_embedder import IdentityModulation, adain_inject
from .layers import Downsample, Upsample, group_norm, timestep_embedding

logger = logging.getLogger(__name__)


class DenoiserResBlock(nn.Module):
    """Residual block whose second normalization is AdaIN when an identity size is given."""

    def __init__(self, in_channels: int, out_channels: int, time_dim: int, id_dim: Optional[int] = None):
        super().__init__()
        self.norm1 = group_norm(in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1)
        self.time_proj = nn.Sequential(nn.SiLU(), nn.Linear(time_dim, out_channels))
        self.modulation = IdentityModulation(id_dim, out_channels) if id_dim else None
        self.norm2 = None if self.modulation is not None else group_norm(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1)
        self.shortcut = (
            nn.Conv2d(in_channels, out_channels, kernel_size=1) if in_channels != out_channels else nn.Identity()
        )

    def forward(self, x: torch.Tensor, time_emb: torch.Tensor, f_id: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(time_emb)[:, :, None, None]
        if self.modulation is not None:
            if f_id is None:
                raise ValueError("This denoiser was built with identity injection; f_id is required")
            h = adain_inject(h, f_id, self.modulation)
        else:
            h = self.norm2(h)
        h = self.conv2(F.silu(h))
        return h + self.shortcut(x)


class Attention(nn.Module):
    """Multi-head attention; keys and values come from ``context`` when given."""

    def __init__(self, query_dim: int, context_dim: Optional[int] = None, num_heads: int = 4):
        super().__init__()
        if query_dim % num_heads:
            raise ValueError(f"query_dim={query_dim} must be divisible by num_heads={num_heads}")
        context_dim = context_dim or query_dim
        self.num_heads = num_heads
        self.dim_head = query_dim // num_heads
        self.to_q = nn.Linear(query_dim, query_dim, bias=False)
        self.to_k = nn.Linear(context_dim, query_dim, bias=False)
        self.to_v = nn.Linear(context_dim, query_dim, bias=False)
        self.to_out = nn.Linear(query_dim, query_dim)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.num_heads, self.dim_head).transpose(1, 2)

    def forward(self, x: torch.Tensor, context: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        context = x if context is None else context
        q, k, v = self._heads(self.to_q(x)), self._heads(self.to_k(context)), self._heads(self.to_v(context))
        probs = (torch.einsum("bhnd,bhmd->bhnm", q, k) * self.dim_head ** -0.5).softmax(dim=-1)
        out = torch.einsum("bhnm,bhmd->bhnd", probs, v)
        out = out.transpose(1, 2).reshape(x.shape[0], x.shape[1], -1)
        return self.to_out(out), probs


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, context_dim: int, num_heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, num_heads=num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, context_dim, num_heads)
        self.norm3 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        x = x + self.self_attn(self.norm1(x))[0]
        attended, probs = self.cross_attn(self.norm2(x), context)
        x = x + attended
        x = x + self.ff(self.norm3(x))
        return x, probs


class SpatialTransformer(nn.Module):
    """
    Transformer over the positions of a feature map, cross-attending to tokens.

    When ``record`` is passed, each block appends its head-averaged
    cross-attention probabilities (B, h·w, N_S) to it.
    """

    def __init__(self, channels: int, num_heads: int, context_dim: int, depth: int = 1):
        super().__init__()
        self.norm = group_norm(channels)
        self.proj_in = nn.Conv2d(channels, channels, kernel_size=1)
        self.blocks = nn.ModuleList([TransformerBlock(channels, context_dim, num_heads) for _ in range(depth)])
        self.proj_out = nn.Conv2d(channels, channels, kernel_size=1)

    def forward(self, x: torch.Tensor, context: torch.Tensor,
                record: Optional[List[torch.Tensor]] = None) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = self.proj_in(self.norm(x)).flatten(2).transpose(1, 2)
        for block in self.blocks:
            tokens, probs = block(tokens, context)
            if record is not None:
                record.append(probs.mean(dim=1))
        return x + self.proj_out(tokens.transpose(1, 2).reshape(b, c, h, w))


class ConditionalUNet(nn.Module):
    """ε_θ(z_t, t | f_r, semantic tokens, f_id)."""

    def __init__(self, config: DiffusionConfig, latent_size: int, id_dim: Optional[int] = None):
        super().__init__()
        self.config = config
        self.latent_size = latent_size
        base, mults = config.base_channels, config.channel_multipliers
        time_dim = 4 * base
        id_dim = id_dim if config.use_identity else None
        self.use_identity = id_dim is not None
        if config.use_identity and not id_dim:
            raise ValueError("diffusion.use_identity is set but no identity embedding size was given")

        self.time_embed = nn.Sequential(nn.Linear(base, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))
        self.conv_in = nn.Conv2d(2 * config.latent_channels, base, kernel_size=3, padding=1)

        def transformer(channels: int) -> SpatialTransformer:
            return SpatialTransformer(channels, config.num_heads, config.context_dim, config.transformer_depth)

        self.input_blocks = nn.ModuleList()
        skip_channels = [base]
        channels, resolution = base, latent_size
        for level, mult in enumerate(mults):
            for _ in range(config.num_res_blocks):
                layers: List[nn.Module] = [DenoiserResBlock(channels, base * mult, time_dim, id_dim)]
                channels = base * mult
                if resolution in config.attention_resolutions:
                    layers.append(transformer(channels))
                self.input_blocks.append(nn.ModuleList(layers))
                skip_channels.append(channels)
            if level < len(mults) - 1:
                self.input_blocks.append(nn.ModuleList([Downsample(channels)]))
                skip_channels.append(channels)
                resolution //= 2

        self.middle_block = nn.ModuleList([
            DenoiserResBlock(channels, channels, time_dim, id_dim),
            transformer(channels),
            DenoiserResBlock(channels, channels, time_dim, id_dim),
        ])

        self.output_blocks = nn.ModuleList()
        for level in reversed(range(len(mults))):
            for i in range(config.num_res_blocks + 1):
                layers = [DenoiserResBlock(channels + skip_channels.pop(), base * mults[level], time_dim, id_dim)]
                channels = base * mults[level]
                if resolution in config.attention_resolutions:
                    layers.append(transformer(channels))
                if level > 0 and i == config.num_res_blocks:
                    layers.append(Upsample(channels))
                    resolution *= 2
                self.output_blocks.append(nn.ModuleList(layers))

        self.norm_out = group_norm(channels)
        self.conv_out = nn.Conv2d(channels, config.latent_channels, kernel_size=3, padding=1)

    def cross_attention_modules(self) -> List[Attention]:
        return [m.cross_attn for m in self.modules() if isinstance(m, TransformerBlock)]

    @staticmethod
    def _run(layers: nn.ModuleList, h: torch.Tensor, time_emb: torch.Tensor, f_id: Optional[torch.Tensor],
             context: torch.Tensor, record: Optional[List[torch.Tensor]]) -> torch.Tensor:
        for layer in layers:
            if isinstance(layer, DenoiserResBlock):
                h = layer(h, time_emb, f_id)
            elif isinstance(layer, SpatialTransformer):
                h = layer(h, context, record)
            else:
                h = layer(h)
        return h

    def forward(
        self,
        z_t: torch.Tensor,
        t: torch.Tensor,
        f_r: torch.Tensor,
        tokens: torch.Tensor,
        f_id: Optional[torch.Tensor] = None,
        return_attention: bool = False,
    ) -> Union[torch.Tensor, Tuple[torch.Tensor, List[torch.Tensor]]]:
        """
        Predict the noise in ``z_t``.

        Args:
            z_t: (B, c, h, w) noisy latents
            t: (B,) timesteps in [1, T]
            f_r: (B, c, h, w) latent of the conditioning render
            tokens: (B, N_S, context_dim) semantic tokens
            f_id: (B, D_id) identity tokens, required when identity injection is on
            return_attention: Also return the per-layer cross-attention record

        Returns:
            Predicted noise, plus the list of (B, h_l·w_l, N_S) maps when requested
        """
        if z_t.shape != f_r.shape:
            raise ValueError(f"z_t {tuple(z_t.shape)} and f_r {tuple(f_r.shape)} must have equal shapes")
        if tokens.shape[-1] != self.config.context_dim:
            raise ValueError(
                f"Token dimension {tokens.shape[-1]} does not match context_dim={self.config.context_dim}"
            )
        if not self.use_identity:
            f_id = None

        record: Optional[List[torch.Tensor]] = [] if return_attention else None
        time_emb = self.time_embed(timestep_embedding(t, self.config.base_channels).to(z_t.dtype))

        h = self.conv_in(torch.cat([z_t, f_r], dim=1))
        skips = [h]
        for layers in self.input_blocks:
            h = self._run(layers, h, time_emb, f_id, tokens, record)
            skips.append(h)
        h = self._run(self.middle_block, h, time_emb, f_id, tokens, record)
        for layers in self.output_blocks:
            h = self._run(layers, torch.cat([h, skips.pop()], dim=1), time_emb, f_id, tokens, record)

        eps = self.conv_out(F.silu(self.norm_out(h)))
        if return_attention:
            return eps, record
        return eps
