"""
Identity embedding network, its additive-angular-margin training head and
AdaIN injection of the identity token into feature maps.
"""

import logging
import math
from typing import Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..utils.config_loader import IdentityConfig
from .layers import ConvEncoder

logger = logging.getLogger(__name__)

IN_EPS = 1e-5


class IdentityEmbedder(nn.Module):
    """Small CNN producing unit-norm identity tokens."""

    def __init__(self, config: IdentityConfig, image_size: int):
        super().__init__()
        self.config = config
        self.trunk = ConvEncoder(config.base_channels, image_size)
        self.head = nn.Linear(self.trunk.out_channels, config.embedding_dim)
        self.register_buffer("trained", torch.tensor(False))

    def features(self, image: torch.Tensor) -> torch.Tensor:
        """Penultimate pooled features (used by the FID proxy)."""
        return self.trunk(image)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.head(self.trunk(image)), dim=-1)

    def mark_trained(self):
        self.trained.fill_(True)

    @torch.no_grad()
    def embed(self, image: torch.Tensor) -> torch.Tensor:
        """Identity tokens of a trained embedder."""
        if not bool(self.trained):
            raise RuntimeError("Identity embedder checkpoint is untrained; run `train-id` first")
        return self(image)


class ArcMarginHead(nn.Module):
    """
    Cosine classifier with an additive angular margin on the target class.

    logits = s·cos(θ_y + m) for the target class and s·cos(θ_j) otherwise.
    Past θ_y = π - m the cosine turns back up, so the target logit falls back
    to the linear penalty cos(θ_y) - m·sin(m) there and stays monotone in θ_y.
    With m = 0 the target logit is the plain scaled cosine.
    """

    def __init__(self, embedding_dim: int, n_classes: int, margin: float = 0.2, scale: float = 16.0):
        super().__init__()
        self.margin = margin
        self.scale = scale
        self.threshold = math.cos(math.pi - margin)
        self.fallback = math.sin(math.pi - margin) * margin
        self.weight = nn.Parameter(torch.empty(n_classes, embedding_dim))
        nn.init.xavier_uniform_(self.weight)

    def forward(self, embeddings: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        cosine = F.linear(F.normalize(embeddings, dim=-1), F.normalize(self.weight, dim=-1))
        if self.margin == 0:
            return self.scale * cosine
        theta = torch.acos(cosine.clamp(-1.0 + 1e-7, 1.0 - 1e-7))
        target = torch.where(cosine > self.threshold, torch.cos(theta + self.margin), cosine - self.fallback)
        one_hot = F.one_hot(labels, num_classes=cosine.shape[1]).to(cosine.dtype)
        return self.scale * (one_hot * target + (1.0 - one_hot) * cosine)


class IdentityModulation(nn.Module):
    """
    SiLU followed by one affine layer mapping f_id to per-channel (h_s, h_b).

    The affine layer starts at zero and h_s = 1 + γ, so a fresh module
    reduces to plain instance normalization.
    """

    def __init__(self, id_dim: int, channels: int):
        super().__init__()
        self.channels = channels
        self.proj = nn.Linear(id_dim, 2 * channels)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, f_id: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        gamma, beta = self.proj(F.silu(f_id)).chunk(2, dim=-1)
        return 1.0 + gamma, beta


def adain(features: torch.Tensor, scale: torch.Tensor, bias: torch.Tensor, eps: float = IN_EPS) -> torch.Tensor:
    """h_s·IN(f) + h_b with per-channel scale and bias of shape (B, C)."""
    if scale.shape[-1] != features.shape[1] or bias.shape[-1] != features.shape[1]:
        raise ValueError(
            f"AdaIN parameters have {scale.shape[-1]} channels, features have {features.shape[1]}"
        )
    normalized = F.instance_norm(features, eps=eps)
    return scale[:, :, None, None] * normalized + bias[:, :, None, None]


def adain_inject(features: torch.Tensor, f_id: torch.Tensor, modulation: IdentityModulation) -> torch.Tensor:
    """Instance-normalize ``features`` and modulate them with parameters predicted from ``f_id``."""
    if modulation.channels != features.shape[1]:
        raise ValueError(
            f"Modulation predicts {modulation.channels} channels, features have {features.shape[1]}"
        )
    scale, bias = modulation(f_id)
    return adain(features, scale, bias)
