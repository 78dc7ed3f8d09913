"""
The trainable editing model: denoiser plus the region encoder it finetunes.
"""

from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..utils.config_loader import RunConfig
from .diffusion import LatentDiffusion
from .rsc_encoder import RSCEncoder, SemanticTokens


def resize_masks(masks: torch.Tensor, size: int) -> torch.Tensor:
    """Resize (B, S, h, w) token masks to ``size`` and renormalize over tokens."""
    if masks.shape[-1] != size:
        mode = "bilinear" if size > masks.shape[-1] else "area"
        kwargs = {"align_corners": False} if mode == "bilinear" else {}
        masks = F.interpolate(masks, size=(size, size), mode=mode, **kwargs)
    return masks / masks.sum(dim=1, keepdim=True).clamp_min(1e-12)


class FaceEditingModel(nn.Module):
    """
    Latent diffusion denoiser with its semantic-token encoder.

    The encoder is initialized from the pretrained region encoder and
    finetuned jointly with the denoiser unless frozen.
    """

    def __init__(self, config: RunConfig):
        super().__init__()
        self.latent_size = config.latent_size
        self.rsc = RSCEncoder(config.rsc, config.image_size)
        id_dim: Optional[int] = config.identity.embedding_dim if config.diffusion.use_identity else None
        self.diffusion = LatentDiffusion(config.diffusion, config.latent_size, id_dim)

    def semantic_tokens(self, source: torch.Tensor) -> SemanticTokens:
        return self.rsc(source, sample=False)

    @torch.no_grad()
    def query_masks(self, query: torch.Tensor) -> torch.Tensor:
        """Region masks of the query image at latent resolution, gradient-free."""
        return resize_masks(self.rsc(query, sample=False).attn_masks, self.latent_size)
