"""
Stage trainers, one per checkpoint.
"""

from .ae_trainer import AutoencoderTrainer
from .base import BaseTrainer
from .diffusion_trainer import DiffusionTrainer
from .estimator_trainer import EstimatorTrainer
from .identity_trainer import IdentityTrainer
from .rsc_trainer import RSCTrainer

__all__ = [
    "AutoencoderTrainer",
    "BaseTrainer",
    "DiffusionTrainer",
    "EstimatorTrainer",
    "IdentityTrainer",
    "RSCTrainer",
]
