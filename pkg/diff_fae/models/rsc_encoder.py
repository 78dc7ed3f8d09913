"""
Region-responsive semantic composition.

A CNN U-Net turns the source image into a feature map; slot attention
distills it into a handful of tokens that compete for image regions. A
spatial-broadcast decoder reconstructs the image from the tokens during
pretraining.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..utils.config_loader import RscConfig
from .layers import Downsample, ResidualBlock, SelfAttention2d, Upsample, group_norm

logger = logging.getLogger(__name__)


@dataclass
class SemanticTokens:
    tokens: torch.Tensor      # (B, N_S, D)
    attn_masks: Optional[torch.Tensor]  # (B, N_S, h, w), sums to 1 over tokens; None after a swap

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[1]


class RegionEncoder(nn.Module):
    """
    U-Net feature extractor.

    The contracting path halves the resolution once per channel multiplier
    (the last stage included), self-attention runs in the middle, and one
    expanding stage returns to the output resolution through a skip
    connection. A learned positional encoding is added to the result.
    """

    def __init__(self, config: RscConfig, image_size: int):
        super().__init__()
        base, mults = config.base_channels, config.channel_multipliers
        self.output_resolution = config.output_resolution
        if image_size != config.output_resolution * 2 ** (len(mults) - 1):
            raise ValueError(
                f"rsc.output_resolution={config.output_resolution} does not match image_size={image_size}"
            )
        if config.output_resolution % 2:
            raise ValueError(f"rsc.output_resolution must be even, got {config.output_resolution}")

        self.conv_in = nn.Conv2d(3, base, kernel_size=3, padding=1)
        self.down = nn.ModuleList()
        channels = base
        for level, mult in enumerate(mults):
            stage: List[nn.Module] = []
            for _ in range(config.num_res_blocks):
                stage.append(ResidualBlock(channels, base * mult))
                channels = base * mult
            self.down.append(nn.Sequential(*stage))
        skip_channels = channels
        self.downsamples = nn.ModuleList([Downsample(base * m) for m in mults])

        self.mid_block1 = ResidualBlock(channels, channels)
        self.mid_attn = SelfAttention2d(channels, config.num_heads)
        self.mid_block2 = ResidualBlock(channels, channels)

        self.upsample = Upsample(channels)
        self.up = nn.Sequential(
            ResidualBlock(channels + skip_channels, channels),
            *[ResidualBlock(channels, channels) for _ in range(config.num_res_blocks - 1)],
        )
        self.norm_out = group_norm(channels)
        self.conv_out = nn.Conv2d(channels, config.out_channels, kernel_size=1)
        self.position = nn.Parameter(
            0.02 * torch.randn(1, config.out_channels, config.output_resolution, config.output_resolution)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Image (B, 3, H, W) -> features (B, h'·w', D)."""
        h = self.conv_in(x)
        for stage, downsample in zip(self.down, self.downsamples):
            h = stage(h)
            skip = h
            h = downsample(h)
        h = self.mid_block2(self.mid_attn(self.mid_block1(h)))
        h = self.up(torch.cat([self.upsample(h), skip], dim=1))
        h = self.conv_out(F.silu(self.norm_out(h))) + self.position
        return h.flatten(2).transpose(1, 2)


class TokenInitializer(nn.Module):
    """
    Learned Gaussian over initial tokens.

    Means are per token and the log standard deviation is shared. Training
    draws a sample per image; evaluation returns the means.
    """

    def __init__(self, num_slots: int, dim: int):
        super().__init__()
        self.mu = nn.Parameter(torch.randn(1, num_slots, dim) * dim ** -0.5)
        self.log_sigma = nn.Parameter(torch.full((1, 1, dim), -1.0))

    def forward(self, batch_size: int, sample: Optional[bool] = None,
                generator: Optional[torch.Generator] = None) -> torch.Tensor:
        mu = self.mu.expand(batch_size, -1, -1)
        sample = self.training if sample is None else sample
        if not sample:
            return mu
        noise = torch.randn(mu.shape, generator=generator, device=mu.device, dtype=mu.dtype)
        return mu + self.log_sigma.exp() * noise


class SlotAttention(nn.Module):
    """Iterative attention with the softmax taken over tokens, GRU update and residual MLP."""

    def __init__(self, dim: int, iterations: int = 3, hidden_dim: int = 256, eps: float = 1e-8):
        super().__init__()
        if iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {iterations}")
        self.iterations = iterations
        self.eps = eps
        self.scale = dim ** -0.5

        self.norm_inputs = nn.LayerNorm(dim)
        self.norm_slots = nn.LayerNorm(dim)
        self.norm_mlp = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.gru = nn.GRUCell(dim, dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden_dim), nn.ReLU(), nn.Linear(hidden_dim, dim))

    def forward(self, inputs: torch.Tensor, slots: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Args:
            inputs: (B, N, D) features
            slots: (B, S, D) initial tokens

        Returns:
            Tuple of (tokens (B, S, D), masks (B, S, N)) with masks from the last iteration
        """
        b, s, d = slots.shape
        inputs = self.norm_inputs(inputs)
        k, v = self.to_k(inputs), self.to_v(inputs)

        masks = None
        for _ in range(self.iterations):
            slots_prev = slots
            q = self.to_q(self.norm_slots(slots))
            logits = torch.einsum("bsd,bnd->bsn", q, k) * self.scale
            if not torch.isfinite(logits).all():
                raise RuntimeError(
                    f"Slot attention produced non-finite logits "
                    f"(inputs finite: {bool(torch.isfinite(inputs).all())}, "
                    f"slots finite: {bool(torch.isfinite(slots).all())})"
                )
            masks = logits.softmax(dim=1)
            weights = masks + self.eps
            weights = weights / weights.sum(dim=-1, keepdim=True)
            updates = torch.einsum("bsn,bnd->bsd", weights, v)

            slots = self.gru(updates.reshape(-1, d), slots_prev.reshape(-1, d)).reshape(b, s, d)
            slots = slots + self.mlp(self.norm_mlp(slots))
        return slots, masks


class SpatialBroadcastDecoder(nn.Module):
    """Decodes each token independently into RGB plus an alpha logit at image resolution."""

    def __init__(self, slot_dim: int, channels: int, broadcast_resolution: int, image_size: int):
        super().__init__()
        self.broadcast_resolution = broadcast_resolution
        self.position = nn.Parameter(0.02 * torch.randn(1, slot_dim, broadcast_resolution, broadcast_resolution))
        layers: List[nn.Module] = [nn.Conv2d(slot_dim, channels, kernel_size=3, padding=1), nn.SiLU()]
        resolution = broadcast_resolution
        while resolution < image_size:
            layers += [Upsample(channels), nn.SiLU()]
            resolution *= 2
        layers += [nn.Conv2d(channels, channels, kernel_size=3, padding=1), nn.SiLU(),
                   nn.Conv2d(channels, 4, kernel_size=3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, tokens: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        b, s, d = tokens.shape
        grid = tokens.reshape(b * s, d, 1, 1).expand(-1, -1, self.broadcast_resolution, self.broadcast_resolution)
        out = self.net(grid + self.position)
        out = out.reshape(b, s, 4, out.shape[-2], out.shape[-1])
        return torch.sigmoid(out[:, :, :3]), out[:, :, 3:]


class RSCEncoder(nn.Module):
    """Region encoder, token initializer, slot attention and pretraining decoder."""

    def __init__(self, config: RscConfig, image_size: int):
        super().__init__()
        if config.out_channels != config.slot_dim:
            raise ValueError(
                f"rsc.out_channels={config.out_channels} must equal rsc.slot_dim={config.slot_dim}"
            )
        self.config = config
        self.image_size = image_size
        self.encoder = RegionEncoder(config, image_size)
        self.init_tokens = TokenInitializer(config.num_slots, config.slot_dim)
        self.slot_attention = SlotAttention(config.slot_dim, config.num_iterations, config.mlp_hidden_dim)
        self.decoder = SpatialBroadcastDecoder(
            config.slot_dim, config.decoder_channels, config.output_resolution, image_size
        )

    @property
    def num_slots(self) -> int:
        return self.config.num_slots

    def encode_features(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() != 4 or image.shape[-1] != self.image_size or image.shape[-2] != self.image_size:
            raise ValueError(f"Expected (B, 3, {self.image_size}, {self.image_size}) images, got {tuple(image.shape)}")
        return self.encoder(image)

    def forward(
        self,
        image: torch.Tensor,
        init: Optional[torch.Tensor] = None,
        generator: Optional[torch.Generator] = None,
        sample: Optional[bool] = None,
    ) -> SemanticTokens:
        """
        Extract semantic tokens.

        Args:
            image: (B, 3, H, W) images in [0, 1]
            init: Explicit initial tokens (B, S, D); drawn from the initializer when None
            generator: RNG for sampled initial tokens
            sample: Sample initial tokens; defaults to ``self.training``

        Returns:
            SemanticTokens
        """
        features = self.encode_features(image)
        if init is None:
            init = self.init_tokens(image.shape[0], sample=sample, generator=generator)
        tokens, masks = self.slot_attention(features, init)
        r = self.config.output_resolution
        return SemanticTokens(tokens=tokens, attn_masks=masks.reshape(image.shape[0], -1, r, r))

    def decode_slots(self, tokens: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """
        Returns:
            Tuple of (per-token RGB (B, S, 3, H, W), per-token alpha (B, S, 1, H, W)
            normalized over tokens, merged image (B, 3, H, W))
        """
        rgb, alpha_logits = self.decoder(tokens)
        alpha = alpha_logits.softmax(dim=1)
        return rgb, alpha, (alpha * rgb).sum(dim=1)

    def reconstruction_loss(self, image: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        semantic = self(image, generator=generator)
        _, _, merged = self.decode_slots(semantic.tokens)
        return F.mse_loss(merged, image)

    @torch.no_grad()
    def slot_masks(self, image: torch.Tensor) -> torch.Tensor:
        """Attention masks bilinearly upsampled to image resolution (B, S, H, W)."""
        return upsample_masks(self(image, sample=False).attn_masks, image.shape[-1])


def upsample_masks(masks: torch.Tensor, size: int) -> torch.Tensor:
    if masks.shape[-1] == size:
        return masks
    return F.interpolate(masks, size=(size, size), mode="bilinear", align_corners=False)
