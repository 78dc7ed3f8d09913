"""
Checkpoint-backed construction of the trained components.
"""

import logging
from typing import Dict, Optional, Tuple

import torch

from ..data.dataset import load_dataset_template
from ..geometry.flame_lite import HeadTemplate
from ..models.estimator import CoefficientEstimator
from ..models.fae_model import FaceEditingModel
from ..models.identity_embedder import IdentityEmbedder
from ..models.latent_ae import LatentAutoencoder
from ..models.rsc_encoder import RSCEncoder
from ..utils.checkpoint import STAGE_COMMANDS, load_checkpoint, read_metadata_json, stage_checkpoint
from ..utils.config_loader import RunConfig, config_digest
from ..utils.errors import MissingPrerequisiteError

logger = logging.getLogger(__name__)


def _load(config: RunConfig, stage: str, module: torch.nn.Module, device: torch.device) -> Dict[str, str]:
    metadata = load_checkpoint(
        stage_checkpoint(config, stage), module, kind=stage,
        digest=config_digest(config, stage), stage=STAGE_COMMANDS[stage],
    )
    module.to(device).eval()
    module.requires_grad_(False)
    return metadata


def load_template_for(config: RunConfig) -> HeadTemplate:
    try:
        return load_dataset_template(config.paths.data_root)
    except FileNotFoundError:
        raise MissingPrerequisiteError(f"{config.paths.data_root}/template.safetensors", STAGE_COMMANDS["dataset"])


def load_autoencoder(config: RunConfig, device: torch.device) -> LatentAutoencoder:
    model = LatentAutoencoder(config.ae, config.image_size)
    _load(config, "latent_ae", model, device)
    return model


def load_rsc(config: RunConfig, device: torch.device) -> Tuple[RSCEncoder, Dict[str, int]]:
    """Pretrained region encoder and its token-to-region assignment."""
    model = RSCEncoder(config.rsc, config.image_size)
    metadata = _load(config, "rsc", model, device)
    return model, read_metadata_json(metadata, "region_assignment", {})


def load_embedder(config: RunConfig, device: torch.device) -> IdentityEmbedder:
    model = IdentityEmbedder(config.identity, config.image_size)
    _load(config, "identity", model, device)
    if not bool(model.trained):
        raise RuntimeError(f"{stage_checkpoint(config, 'identity')} holds an untrained embedder")
    return model


def load_estimator(config: RunConfig, device: torch.device,
                   template: Optional[HeadTemplate] = None) -> Tuple[CoefficientEstimator, Dict[str, float]]:
    """Trained estimator and its validation error floor per attribute."""
    template = template or load_template_for(config)
    model = CoefficientEstimator(config.estimator, config.image_size, template.d_shape, template.d_expr)
    metadata = _load(config, "estimator", model, device)
    return model, read_metadata_json(metadata, "validation_l2", {})


def load_editing_model(config: RunConfig, device: torch.device) -> Tuple[FaceEditingModel, Dict[str, int]]:
    """Trained denoiser with its finetuned encoder, plus the token-to-region assignment."""
    model = FaceEditingModel(config)
    metadata = _load(config, "diffusion", model, device)
    return model, read_metadata_json(metadata, "region_assignment", {})


def inference_device(config: RunConfig) -> torch.device:
    if config.device == "cpu":
        return torch.device("cpu")
    if config.device == "cuda" and not torch.cuda.is_available():
        raise RuntimeError("device 'cuda' requested but CUDA is not available")
    return torch.device("cuda" if torch.cuda.is_available() else "cpu")
