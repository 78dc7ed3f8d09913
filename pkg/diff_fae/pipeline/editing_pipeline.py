"""
Main pipeline for facial appearance editing with the trained components.
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from ..data.dataset import image_to_tensor
from ..geometry.coefficients import PhysicalCoefficients, WeakPerspectiveCamera, build_edit_coefficients, changed_fields
from ..geometry.flame_lite import HeadTemplate
from ..geometry.renderer import render_condition
from ..models.diffusion import ddim_timesteps, merge_cross_attention
from ..models.estimator import CoefficientEstimator
from ..models.rsc_encoder import SemanticTokens
from ..utils.config_loader import RunConfig
from ..utils.image_io import SLOT_PALETTE, colorize_labels, make_grid, quantize_8bit, stack_rows
from .components import (
    inference_device,
    load_autoencoder,
    load_editing_model,
    load_embedder,
    load_estimator,
    load_template_for,
)


def condition_images(template: HeadTemplate, coefficients: Sequence[PhysicalCoefficients],
                     size: int) -> Tuple[torch.Tensor, np.ndarray]:
    """
    Condition renders (B, 3, H, W) and their coverage masks (B, H, W).

    Renders are snapped to 8-bit levels, the precision of the PNG renders the
    denoiser is trained on.
    """
    renders = [render_condition(template, c, size, size) for c in coefficients]
    images = torch.stack([image_to_tensor(quantize_8bit(r.image)) for r in renders])
    return images, np.stack([r.coverage_mask for r in renders])


@dataclass
class EditResult:
    """Result of one batch of edits."""
    source: torch.Tensor        # I_S (B, 3, H, W)
    condition: torch.Tensor     # I_R, the conditioning render
    output: torch.Tensor        # I_O
    coefficients: List[PhysicalCoefficients]
    coverage: np.ndarray        # (B, H, W) render coverage
    tokens: SemanticTokens
    f_r: torch.Tensor
    f_id: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return self.source.shape[0]


class EditingPipeline:
    """
    Editing pipeline over trained checkpoints.

    This class orchestrates one edit:
    1. Builds render coefficients by field substitution (identity from the source)
    2. Renders the condition and encodes it to a latent
    3. Extracts semantic tokens and the identity token from the source
    4. Samples a latent with DDIM and decodes it to the output image
    """

    def __init__(self, config: RunConfig, device: Optional[torch.device] = None):
        """Initialize the editing pipeline."""
        self.config = config
        self.device = device or inference_device(config)
        self.logger = logging.getLogger(__name__)

        # Initialize components
        self.template = load_template_for(config)
        self.autoencoder = load_autoencoder(config, self.device)
        self.model, self.region_assignment = load_editing_model(config, self.device)
        self.embedder = load_embedder(config, self.device) if config.diffusion.use_identity else None
        self._estimator: Optional[CoefficientEstimator] = None

        self.logger.info(
            f"Editing pipeline initialized on {self.device} with {self.num_tokens} semantic tokens "
            f"and {config.diffusion.ddim_steps} DDIM steps"
        )

    @property
    def num_tokens(self) -> int:
        return self.model.rsc.num_slots

    @property
    def image_size(self) -> int:
        return self.config.image_size

    @property
    def estimator(self) -> CoefficientEstimator:
        if self._estimator is None:
            self._estimator, _ = load_estimator(self.config, self.device, self.template)
        return self._estimator

    def _images(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() == 3:
            images = images.unsqueeze(0)
        return images.to(self.device).float()

    def render_conditions(self, coefficients: Sequence[PhysicalCoefficients]) -> Tuple[torch.Tensor, np.ndarray]:
        images, coverage = condition_images(self.template, coefficients, self.image_size)
        return images.to(self.device), coverage

    @torch.no_grad()
    def semantic_tokens(self, images: torch.Tensor) -> SemanticTokens:
        return self.model.semantic_tokens(self._images(images))

    @torch.no_grad()
    def identity_tokens(self, images: torch.Tensor) -> Optional[torch.Tensor]:
        if self.embedder is None:
            return None
        return self.embedder.embed(self._images(images))

    @torch.no_grad()
    def estimate_query(self, images: torch.Tensor,
                       sources: Sequence[PhysicalCoefficients]) -> List[PhysicalCoefficients]:
        """
        Query coefficients estimated from images, with identity fields kept from the sources.

        Args:
            images: (B, 3, H, W) query images
            sources: Source coefficients supplying shape and albedo

        Returns:
            One record per image
        """
        vectors = self.estimator.predict(self._images(images)).double().cpu().numpy()
        if len(vectors) != len(sources):
            raise ValueError(f"Got {len(vectors)} query images for {len(sources)} sources")
        blocks = self.estimator.slices
        estimates = []
        for vector, source in zip(vectors, sources):
            camera = vector[blocks["camera"]].copy()
            camera[0] = max(camera[0], 1e-3)
            estimates.append(replace(
                source,
                pose=vector[blocks["pose"]],
                expression=vector[blocks["expression"]],
                lighting=vector[blocks["lighting"]].reshape(9, 3),
                camera=WeakPerspectiveCamera.from_vector(camera),
            ))
        return estimates

    @torch.no_grad()
    def edit(
        self,
        source_images: torch.Tensor,
        source_coeffs: Sequence[PhysicalCoefficients],
        query_coeffs: Sequence[PhysicalCoefficients],
        only: Optional[Sequence[str]] = None,
        tokens: Optional[SemanticTokens] = None,
        seed: Optional[int] = None,
    ) -> EditResult:
        """
        Edit source faces towards the query attributes.

        Args:
            source_images: (B, 3, H, W) source images I_S
            source_coeffs: Physical coefficients of the sources
            query_coeffs: Coefficients supplying pose, expression, lighting and camera
            only: Restrict the edit to a subset of ``pose``, ``expression``, ``lighting``
            tokens: Semantic tokens to condition on instead of the sources' own
            seed: DDIM noise seed (the run seed by default)

        Returns:
            EditResult with I_S, I_R and I_O
        """
        source_images = self._images(source_images)
        if not len(source_coeffs) == len(query_coeffs) == source_images.shape[0]:
            raise ValueError(
                f"Batch mismatch: {source_images.shape[0]} images, {len(source_coeffs)} source and "
                f"{len(query_coeffs)} query coefficient records"
            )

        coefficients = [build_edit_coefficients(s, q, only) for s, q in zip(source_coeffs, query_coeffs)]
        for i, (source, edited) in enumerate(zip(source_coeffs, coefficients)):
            self.logger.info(f"Edit {i}: fields changed from source: {changed_fields(source, edited) or 'none'}")

        condition, coverage = self.render_conditions(coefficients)
        f_r = self.autoencoder.encode(condition)
        if tokens is None:
            tokens = self.model.semantic_tokens(source_images)
        f_id = self.identity_tokens(source_images)

        z0 = self.model.diffusion.sample(
            f_r, tokens.tokens, f_id, self.config.diffusion.ddim_steps,
            seed=self.config.seed if seed is None else seed,
            verbose=self.logger.isEnabledFor(logging.DEBUG),
        )
        output = self.autoencoder.decode(z0).clamp(0.0, 1.0)
        return EditResult(source=source_images, condition=condition, output=output, coefficients=coefficients,
                          coverage=coverage, tokens=tokens, f_r=f_r, f_id=f_id)

    @staticmethod
    def swap_tokens(source: SemanticTokens, donor: SemanticTokens, region_indices: Sequence[int]) -> SemanticTokens:
        """
        Replace the source tokens at ``region_indices`` by the donor's.

        Token i covers the same region for every image of one encoder, so the
        donor's matched token sits at the same index. Masks are dropped since
        the denoiser recomputes its own attention.
        """
        if source.tokens.shape != donor.tokens.shape:
            raise ValueError(
                f"Source tokens {tuple(source.tokens.shape)} and donor tokens {tuple(donor.tokens.shape)} differ"
            )
        n_tokens = source.num_tokens
        out_of_range = [i for i in region_indices if not 0 <= i < n_tokens]
        if out_of_range:
            raise IndexError(f"Token indices {out_of_range} out of range for {n_tokens} tokens")
        mixed = source.tokens.clone()
        indices = sorted(set(int(i) for i in region_indices))
        if indices:
            mixed[:, indices] = donor.tokens[:, indices]
        return SemanticTokens(tokens=mixed, attn_masks=None)

    def region_indices(self, regions: Sequence[str]) -> List[int]:
        """Token indices of named regions through the stored token-to-region assignment."""
        if not self.region_assignment:
            raise RuntimeError("The diffusion checkpoint carries no token-to-region assignment")
        unknown = [r for r in regions if r not in self.region_assignment]
        if unknown:
            raise ValueError(f"Unknown regions {unknown}, assigned regions are {sorted(self.region_assignment)}")
        return sorted(self.region_assignment[r] for r in regions)

    @torch.no_grad()
    def swap_edit(
        self,
        source_images: torch.Tensor,
        source_coeffs: Sequence[PhysicalCoefficients],
        donor_images: torch.Tensor,
        regions: Sequence[str],
        seed: Optional[int] = None,
    ) -> EditResult:
        """Regenerate the sources with the named region tokens taken from the donors."""
        mixed = self.swap_tokens(
            self.semantic_tokens(source_images), self.semantic_tokens(donor_images), self.region_indices(regions)
        )
        self.logger.info(f"Swapping regions {list(regions)} (tokens {self.region_indices(regions)})")
        return self.edit(source_images, source_coeffs, source_coeffs, tokens=mixed, seed=seed)

    @torch.no_grad()
    def masks(self, images: torch.Tensor) -> torch.Tensor:
        """Token masks of the finetuned encoder at image resolution (B, N_S, H, W)."""
        return self.model.rsc.slot_masks(self._images(images))

    @torch.no_grad()
    def attention_layers(
        self, result: EditResult, timesteps: Optional[List[int]] = None, seed: Optional[int] = None
    ) -> Tuple[List[torch.Tensor], torch.Tensor]:
        """
        Cross-attention maps of the denoiser on the edited latent.

        Args:
            result: Edit to inspect
            timesteps: Diffusion timesteps to record; evenly spaced by default
            seed: Noise seed of the noised latents

        Returns:
            Tuple of (per-layer maps, mean map), each (B, N_S, H, W) and summing to 1 over tokens
        """
        if timesteps is None:
            timesteps = ddim_timesteps(self.config.diffusion.timesteps, self.config.evaluation.attention_timesteps)
        z0 = self.autoencoder.encode(result.output)
        records = self.model.diffusion.attention_maps(
            z0, result.f_r, result.tokens.tokens, result.f_id, timesteps,
            seed=self.config.seed if seed is None else seed,
        )
        n_layers = len(records[0])
        per_layer = [merge_cross_attention([record[layer] for record in records], self.image_size)
                     for layer in range(n_layers)]
        mean = merge_cross_attention([probs for record in records for probs in record], self.image_size)
        return per_layer, mean

    def edit_grid(self, result: EditResult, masks: Optional[torch.Tensor] = None) -> np.ndarray:
        """Rows of source | condition render | output [| token masks]."""
        rows = []
        for i in range(len(result)):
            tiles = [result.source[i], result.condition[i], result.output[i]]
            if masks is not None:
                tiles.extend(self.mask_tiles(masks[i]))
            rows.append(make_grid(tiles))
        return stack_rows(rows)

    @staticmethod
    def mask_tiles(masks: torch.Tensor) -> List[np.ndarray]:
        """Per-token grayscale maps followed by the colored argmax, for one (N_S, H, W) stack."""
        maps = masks.detach().cpu().float()
        tiles = [maps[s].unsqueeze(0).numpy().transpose(1, 2, 0) for s in range(maps.shape[0])]
        tiles.append(colorize_labels(maps.argmax(dim=0).numpy(), SLOT_PALETTE))
        return tiles

    def masks_grid(self, images: torch.Tensor) -> np.ndarray:
        images = self._images(images)
        masks = self.masks(images)
        return stack_rows([make_grid([images[i]] + self.mask_tiles(masks[i])) for i in range(images.shape[0])])

    def attention_grid(self, result: EditResult, per_layer: List[torch.Tensor], mean: torch.Tensor) -> np.ndarray:
        """One row per (sample, layer) plus a mean row per sample."""
        rows = []
        for i in range(len(result)):
            for maps in per_layer + [mean]:
                rows.append(make_grid([result.output[i]] + self.mask_tiles(maps[i])))
        return stack_rows(rows)

    def describe(self) -> Dict[str, object]:
        return {
            "num_tokens": self.num_tokens,
            "use_identity": self.embedder is not None,
            "ddim_steps": self.config.diffusion.ddim_steps,
            "region_assignment": dict(self.region_assignment),
        }
