"""
Coefficient regressor standing in for an off-the-shelf face reconstruction
network: predicts shape, pose, expression, lighting and camera from an image.
"""

from typing import Dict

import torch
import torch.nn as nn

from ..geometry.coefficients import attribute_slices
from ..utils.config_loader import EstimatorConfig
from .layers import ConvEncoder


class CoefficientEstimator(nn.Module):
    def __init__(self, config: EstimatorConfig, image_size: int, d_shape: int, d_expr: int):
        super().__init__()
        self.slices = attribute_slices(d_shape, d_expr)
        out_dim = max(s.stop for s in self.slices.values())
        self.trunk = ConvEncoder(config.base_channels, image_size)
        self.head = nn.Sequential(
            nn.Linear(self.trunk.out_channels, 256), nn.SiLU(), nn.Linear(256, out_dim),
        )
        self.register_buffer("target_mean", torch.zeros(out_dim))
        self.register_buffer("target_std", torch.ones(out_dim))

    @property
    def out_dim(self) -> int:
        return self.target_mean.numel()

    def set_target_statistics(self, targets: torch.Tensor):
        self.target_mean.copy_(targets.mean(dim=0))
        self.target_std.copy_(targets.std(dim=0).clamp_min(1e-3))

    def normalize(self, targets: torch.Tensor) -> torch.Tensor:
        return (targets - self.target_mean) / self.target_std

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """Normalized prediction."""
        return self.head(self.trunk(image))

    @torch.no_grad()
    def predict(self, image: torch.Tensor) -> torch.Tensor:
        return self(image) * self.target_std + self.target_mean

    def split(self, vectors: torch.Tensor) -> Dict[str, torch.Tensor]:
        return {name: vectors[:, s] for name, s in self.slices.items()}
