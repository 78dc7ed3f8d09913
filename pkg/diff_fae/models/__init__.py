"""
Neural components: latent autoencoder, region encoder with slot attention,
identity embedder, conditional denoiser and coefficient estimator.
"""

from .diffusion import (
    LatentDiffusion,
    NoiseSchedule,
    ddim_sample,
    ddim_timesteps,
    diffusion_loss,
    loss_acr,
    loss_ldm,
    merge_cross_attention,
    q_sample,
)
from .estimator import CoefficientEstimator
from .fae_model import FaceEditingModel, resize_masks
from .identity_embedder import ArcMarginHead, IdentityEmbedder, IdentityModulation, adain, adain_inject
from .latent_ae import LatentAutoencoder, VectorQuantizer, codebook_usage
from .rsc_encoder import RSCEncoder, SemanticTokens, SlotAttention, TokenInitializer, upsample_masks
from .unet import ConditionalUNet

__all__ = [
    "LatentDiffusion",
    "NoiseSchedule",
    "ddim_sample",
    "ddim_timesteps",
    "diffusion_loss",
    "loss_acr",
    "loss_ldm",
    "merge_cross_attention",
    "q_sample",
    "CoefficientEstimator",
    "FaceEditingModel",
    "resize_masks",
    "ArcMarginHead",
    "IdentityEmbedder",
    "IdentityModulation",
    "adain",
    "adain_inject",
    "LatentAutoencoder",
    "VectorQuantizer",
    "codebook_usage",
    "RSCEncoder",
    "SemanticTokens",
    "SlotAttention",
    "TokenInitializer",
    "upsample_masks",
    "ConditionalUNet",
]
