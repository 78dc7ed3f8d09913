"""
Noise schedule, training losses and the deterministic DDIM sampler.

Timesteps are 1-indexed: t ∈ {1, ..., T} and ᾱ_0 = 1.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from ..utils.config_loader import DiffusionConfig
from .unet import ConditionalUNet

logger = logging.getLogger(__name__)

NoisePredictor = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


class NoiseSchedule(nn.Module):
    """Linear β schedule with cumulative products held as buffers."""

    def __init__(self, timesteps: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2):
        super().__init__()
        if not 0 < beta_start < beta_end < 1:
            raise ValueError(f"Need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
        self.timesteps = timesteps
        betas = torch.linspace(beta_start, beta_end, timesteps, dtype=torch.float64)
        alphas_cumprod = torch.cumprod(1.0 - betas, dim=0)
        # index 0 holds ᾱ_0 = 1 so that alpha_bar[t] is ᾱ_t
        self.register_buffer("betas", betas.float(), persistent=False)
        self.register_buffer(
            "alpha_bar", torch.cat([torch.ones(1, dtype=torch.float64), alphas_cumprod]).float(), persistent=False
        )

    @classmethod
    def from_config(cls, config: DiffusionConfig) -> "NoiseSchedule":
        return cls(config.timesteps, config.beta_start, config.beta_end)

    def check_timesteps(self, t: torch.Tensor):
        if torch.any(t < 1) or torch.any(t > self.timesteps):
            raise ValueError(f"Timesteps must lie in [1, {self.timesteps}], got {t.min().item()}..{t.max().item()}")

    def extract(self, t: torch.Tensor, ndim: int) -> torch.Tensor:
        return self.alpha_bar[t].reshape(-1, *([1] * (ndim - 1)))

    def sample_timesteps(self, batch_size: int, device: torch.device,
                         generator: Optional[torch.Generator] = None) -> torch.Tensor:
        return torch.randint(1, self.timesteps + 1, (batch_size,), device=device, generator=generator)


def q_sample(schedule: NoiseSchedule, z0: torch.Tensor, t: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """z_t = √ᾱ_t·z0 + √(1-ᾱ_t)·ε."""
    schedule.check_timesteps(t)
    alpha_bar = schedule.extract(t, z0.dim())
    return alpha_bar.sqrt() * z0 + (1.0 - alpha_bar).sqrt() * noise


def loss_ldm(noise: torch.Tensor, predicted: torch.Tensor) -> torch.Tensor:
    return F.mse_loss(predicted, noise)


def merge_cross_attention(record: List[torch.Tensor], target_res: int) -> torch.Tensor:
    """
    Merge per-layer cross-attention maps into one map per token.

    Args:
        record: (B, h_l·w_l, N_S) spatial-query → token probabilities per layer
        target_res: Side of the merged maps

    Returns:
        (B, N_S, target_res, target_res), summing to 1 over tokens per pixel
    """
    if not record:
        raise ValueError("Cannot merge an empty cross-attention record")
    merged = []
    for probs in record:
        b, n, s = probs.shape
        side = int(round(n ** 0.5))
        if side * side != n:
            raise ValueError(f"Attention layer has {n} positions, expected a square map")
        maps = probs.transpose(1, 2).reshape(b, s, side, side)
        if side != target_res:
            maps = F.interpolate(maps, size=(target_res, target_res), mode="bilinear", align_corners=False)
        merged.append(maps)
    mean = torch.stack(merged).mean(dim=0)
    return mean / mean.sum(dim=1, keepdim=True).clamp_min(1e-12)


def loss_acr(attention: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Mean squared difference between merged attention and region masks, token i ↔ mask i."""
    if attention.shape != masks.shape:
        raise ValueError(f"Attention {tuple(attention.shape)} and masks {tuple(masks.shape)} differ in shape")
    return F.mse_loss(attention, masks)


@dataclass
class DiffusionLosses:
    total: torch.Tensor
    loss_ldm: torch.Tensor
    loss_acr: torch.Tensor


def diffusion_loss(
    unet: ConditionalUNet,
    schedule: NoiseSchedule,
    z0: torch.Tensor,
    f_r: torch.Tensor,
    tokens: torch.Tensor,
    f_id: Optional[torch.Tensor],
    query_masks: Optional[torch.Tensor],
    acr_weight: float,
    generator: Optional[torch.Generator] = None,
) -> DiffusionLosses:
    """
    L = L_LDM + δ·L_ACR for one batch with a fresh timestep per element.

    With δ = 0 the attention term is reported but kept out of the graph, so
    gradients are exactly those of L_LDM.
    """
    t = schedule.sample_timesteps(z0.shape[0], z0.device, generator)
    noise = torch.randn(z0.shape, generator=generator, device=z0.device, dtype=z0.dtype)
    z_t = q_sample(schedule, z0, t, noise)
    predicted, record = unet(z_t, t, f_r, tokens, f_id, return_attention=True)
    ldm = loss_ldm(noise, predicted)

    if query_masks is None:
        return DiffusionLosses(total=ldm, loss_ldm=ldm, loss_acr=ldm.new_zeros(()))
    attention = merge_cross_attention(record, query_masks.shape[-1])
    acr = loss_acr(attention, query_masks.detach())
    if acr_weight == 0:
        return DiffusionLosses(total=ldm, loss_ldm=ldm, loss_acr=acr.detach())
    return DiffusionLosses(total=ldm + acr_weight * acr, loss_ldm=ldm, loss_acr=acr)


def ddim_timesteps(total: int, steps: int) -> List[int]:
    """Uniform subsequence of {T, ..., 1} with ``steps`` entries, descending."""
    if steps > total:
        raise ValueError(f"DDIM steps={steps} exceeds the {total} diffusion timesteps")
    if steps < 1:
        raise ValueError(f"DDIM steps must be >= 1, got {steps}")
    seq = torch.linspace(total, 1, steps, dtype=torch.float64).round().long().tolist()
    return sorted(set(seq), reverse=True)


@torch.no_grad()
def ddim_sample(
    predict_noise: NoisePredictor,
    schedule: NoiseSchedule,
    shape: Tuple[int, ...],
    steps: int,
    seed: int = 0,
    device: Optional[torch.device] = None,
    initial_noise: Optional[torch.Tensor] = None,
    return_trajectory: bool = False,
    verbose: bool = False,
):
    """
    Deterministic (η = 0) DDIM sampling.

    Args:
        predict_noise: Callable (z_t, t) -> ε̂ with the conditioning bound
        schedule: Noise schedule
        shape: Latent batch shape
        steps: Number of sampler steps (<= T)
        seed: Seed of the initial noise
        device: Device of the initial noise
        initial_noise: Explicit z_T, overriding ``seed``
        return_trajectory: Also return the per-step x0 predictions
        verbose: Show a progress bar

    Returns:
        z_0 estimate, or (z_0, list of (t, x0_pred)) with ``return_trajectory``
    """
    sequence = ddim_timesteps(schedule.timesteps, steps)
    if initial_noise is None:
        generator = torch.Generator(device="cpu").manual_seed(seed)
        initial_noise = torch.randn(shape, generator=generator).to(device or schedule.alpha_bar.device)
    z = initial_noise
    trajectory = []
    for i, t in enumerate(tqdm(sequence, desc="DDIM", disable=not verbose)):
        t_prev = sequence[i + 1] if i + 1 < len(sequence) else 0
        alpha_bar, alpha_bar_prev = schedule.alpha_bar[t], schedule.alpha_bar[t_prev]
        t_batch = torch.full((shape[0],), t, device=z.device, dtype=torch.long)
        eps = predict_noise(z, t_batch)
        x0 = (z - (1.0 - alpha_bar).sqrt() * eps) / alpha_bar.sqrt()
        z = alpha_bar_prev.sqrt() * x0 + (1.0 - alpha_bar_prev).sqrt() * eps
        if return_trajectory:
            trajectory.append((t, x0))
    if return_trajectory:
        return z, trajectory
    return z


class LatentDiffusion(nn.Module):
    """The conditional denoiser, its noise schedule and the latent scale factor."""

    def __init__(self, config: DiffusionConfig, latent_size: int, id_dim: Optional[int] = None):
        super().__init__()
        self.config = config
        self.unet = ConditionalUNet(config, latent_size, id_dim)
        self.schedule = NoiseSchedule.from_config(config)
        self.register_buffer("latent_scale", torch.tensor(1.0))

    def set_latent_scale(self, latents: torch.Tensor):
        self.latent_scale.fill_(1.0 / latents.float().std().clamp_min(1e-6).item())

    def losses(self, z0: torch.Tensor, f_r: torch.Tensor, tokens: torch.Tensor, f_id: Optional[torch.Tensor],
               query_masks: Optional[torch.Tensor], acr_weight: float,
               generator: Optional[torch.Generator] = None) -> DiffusionLosses:
        return diffusion_loss(
            self.unet, self.schedule, z0 * self.latent_scale, f_r * self.latent_scale,
            tokens, f_id, query_masks, acr_weight, generator,
        )

    def sample(self, f_r: torch.Tensor, tokens: torch.Tensor, f_id: Optional[torch.Tensor],
               steps: int, seed: int = 0, verbose: bool = False) -> torch.Tensor:
        """Unscaled z_0 for a batch of conditions."""
        f_r_scaled = f_r * self.latent_scale

        def predict(z_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
            return self.unet(z_t, t, f_r_scaled, tokens, f_id)

        z0 = ddim_sample(predict, self.schedule, tuple(f_r.shape), steps, seed, f_r.device, verbose=verbose)
        return z0 / self.latent_scale

    @torch.no_grad()
    def attention_maps(self, z0: torch.Tensor, f_r: torch.Tensor, tokens: torch.Tensor,
                       f_id: Optional[torch.Tensor], timesteps: List[int], seed: int = 0
                       ) -> List[List[torch.Tensor]]:
        """Cross-attention records of noised ``z0`` at the given timesteps."""
        generator = torch.Generator(device="cpu").manual_seed(seed)
        records = []
        for t in timesteps:
            noise = torch.randn(z0.shape, generator=generator).to(z0.device)
            t_batch = torch.full((z0.shape[0],), t, device=z0.device, dtype=torch.long)
            z_t = q_sample(self.schedule, z0 * self.latent_scale, t_batch, noise)
            _, record = self.unet(z_t, t_batch, f_r * self.latent_scale, tokens, f_id, return_attention=True)
            records.append(record)
        return records
