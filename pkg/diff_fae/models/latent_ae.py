"""
Perceptual compression pair: a VQ autoencoder mapping images to the latent
space where diffusion runs (downsample factor 8).
"""

import logging
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..utils.config_loader import AEConfig
from .layers import Downsample, ResidualBlock, Upsample, group_norm

logger = logging.getLogger(__name__)


class VectorQuantizer(nn.Module):
    """
    Nearest-codeword quantization with a straight-through gradient.

    Loss: ||sg(z) - e||² + commitment·||z - sg(e)||².
    """

    def __init__(self, codebook_size: int, code_dim: int, commitment: float = 0.25):
        super().__init__()
        if codebook_size < 16:
            raise ValueError(f"codebook_size must be >= 16, got {codebook_size}")
        self.codebook_size = codebook_size
        self.code_dim = code_dim
        self.commitment = commitment
        self.embedding = nn.Embedding(codebook_size, code_dim)
        self.embedding.weight.data.uniform_(-1.0 / codebook_size, 1.0 / codebook_size)

    def lookup(self, z: torch.Tensor) -> torch.Tensor:
        """Code indices (B, h, w) of the nearest codewords."""
        b, c, h, w = z.shape
        flat = z.permute(0, 2, 3, 1).reshape(-1, c)
        dist = (
            flat.pow(2).sum(1, keepdim=True)
            - 2 * flat @ self.embedding.weight.t()
            + self.embedding.weight.pow(2).sum(1)[None, :]
        )
        return dist.argmin(dim=1).view(b, h, w)

    def embed_indices(self, indices: torch.Tensor) -> torch.Tensor:
        return self.embedding(indices).permute(0, 3, 1, 2).contiguous()

    def forward(self, z: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        indices = self.lookup(z)
        quantized = self.embed_indices(indices)
        loss = F.mse_loss(quantized, z.detach()) + self.commitment * F.mse_loss(z, quantized.detach())
        quantized = z + (quantized - z).detach()
        return quantized, loss, indices


class Encoder(nn.Module):
    def __init__(self, base_channels: int, channel_multipliers: List[int], num_res_blocks: int, code_dim: int):
        super().__init__()
        self.conv_in = nn.Conv2d(3, base_channels, kernel_size=3, padding=1)
        blocks: List[nn.Module] = []
        channels = base_channels
        for level, mult in enumerate(channel_multipliers):
            for _ in range(num_res_blocks):
                blocks.append(ResidualBlock(channels, base_channels * mult))
                channels = base_channels * mult
            if level < len(channel_multipliers) - 1:
                blocks.append(Downsample(channels))
        blocks.append(ResidualBlock(channels, channels))
        self.blocks = nn.Sequential(*blocks)
        self.norm_out = group_norm(channels)
        self.conv_out = nn.Conv2d(channels, code_dim, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.blocks(self.conv_in(x))
        return self.conv_out(F.silu(self.norm_out(h)))


class Decoder(nn.Module):
    def __init__(self, base_channels: int, channel_multipliers: List[int], num_res_blocks: int, code_dim: int):
        super().__init__()
        channels = base_channels * channel_multipliers[-1]
        self.conv_in = nn.Conv2d(code_dim, channels, kernel_size=3, padding=1)
        blocks: List[nn.Module] = [ResidualBlock(channels, channels)]
        for level in reversed(range(len(channel_multipliers))):
            for _ in range(num_res_blocks):
                blocks.append(ResidualBlock(channels, base_channels * channel_multipliers[level]))
                channels = base_channels * channel_multipliers[level]
            if level > 0:
                blocks.append(Upsample(channels))
        self.blocks = nn.Sequential(*blocks)
        self.norm_out = group_norm(channels)
        self.conv_out = nn.Conv2d(channels, 3, kernel_size=3, padding=1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = self.blocks(self.conv_in(z))
        return torch.sigmoid(self.conv_out(F.silu(self.norm_out(h))))


class LatentAutoencoder(nn.Module):
    """
    Encoder/decoder pair with an optional vector-quantization bottleneck.

    In ``vq`` mode the decoder always sees quantized codes; ``encode`` returns
    continuous pre-quantization latents or quantized ones depending on
    ``diffusion_latent``. ``ae`` mode skips quantization entirely.
    """

    def __init__(self, config: AEConfig, image_size: int):
        super().__init__()
        self.config = config
        self.image_size = image_size
        self.factor = 2 ** (len(config.channel_multipliers) - 1)
        self.latent_size = image_size // self.factor
        self.encoder = Encoder(config.base_channels, config.channel_multipliers, config.num_res_blocks, config.code_dim)
        self.decoder = Decoder(config.base_channels, config.channel_multipliers, config.num_res_blocks, config.code_dim)
        self.quantizer = VectorQuantizer(config.codebook_size, config.code_dim, config.commitment)

    @property
    def use_vq(self) -> bool:
        return self.config.mode == "vq"

    @property
    def latent_shape(self) -> Tuple[int, int, int]:
        return self.config.code_dim, self.latent_size, self.latent_size

    def _check_image(self, x: torch.Tensor):
        expected = (3, self.image_size, self.image_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ValueError(f"Expected images of shape (B, {expected}), got {tuple(x.shape)}")

    def _check_latent(self, z: torch.Tensor):
        if z.dim() != 4 or tuple(z.shape[1:]) != self.latent_shape:
            raise ValueError(f"Expected latents of shape (B, {self.latent_shape}), got {tuple(z.shape)}")

    def encode_continuous(self, x: torch.Tensor) -> torch.Tensor:
        self._check_image(x)
        return self.encoder(x)

    def quantize(self, z: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, Optional[torch.Tensor]]:
        if not self.use_vq:
            return z, z.new_zeros(()), None
        return self.quantizer(z)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Latent code fed to the diffusion model."""
        z = self.encode_continuous(x)
        if self.use_vq and self.config.diffusion_latent == "quantized":
            z, _, _ = self.quantizer(z)
        return z

    def encode_indices(self, x: torch.Tensor) -> torch.Tensor:
        if not self.use_vq:
            raise RuntimeError("Code indices are only defined in vq mode")
        return self.quantizer.lookup(self.encode_continuous(x))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """Image in [0, 1]; latents are snapped to the codebook first in vq mode."""
        self._check_latent(z)
        z, _, _ = self.quantize(z)
        return self.decoder(z)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, Optional[torch.Tensor]]:
        z = self.encode_continuous(x)
        zq, vq_loss, indices = self.quantize(z)
        return self.decoder(zq), vq_loss, indices

    def loss(self, x: torch.Tensor) -> Tuple[torch.Tensor, dict]:
        """L1 reconstruction plus codebook/commitment terms."""
        recon, vq_loss, indices = self(x)
        l1 = F.l1_loss(recon, x)
        return l1 + vq_loss, {"loss_l1": l1.item(), "loss_vq": float(vq_loss), "indices": indices}


def codebook_usage(indices: List[torch.Tensor], codebook_size: int) -> float:
    """Fraction of codewords used at least once."""
    if not indices:
        return 0.0
    used = torch.unique(torch.cat([i.reshape(-1) for i in indices]))
    return used.numel() / codebook_size
