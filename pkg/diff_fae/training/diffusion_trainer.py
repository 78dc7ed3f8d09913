"""
Latent diffusion training with region-aware cross-attention supervision.

The autoencoder and identity embedder stay frozen; the region encoder is
initialized from its pretrained checkpoint and finetuned with the denoiser
unless ``diffusion.freeze_encoder`` is set.
"""

import json
from dataclasses import asdict
from pathlib import Path
from typing import Dict, Iterator, Optional

import torch
from tqdm import tqdm

from ..data.dataset import PairDataset
from ..models.fae_model import FaceEditingModel
from ..pipeline.components import load_autoencoder, load_embedder, load_rsc
from .base import TRAIN_LOG_NAME, BaseTrainer


class DiffusionTrainer(BaseTrainer):
    stage = "diffusion"

    def _build_model(self):
        config = self.config
        self.autoencoder = load_autoencoder(config, self.device)
        self.embedder = load_embedder(config, self.device) if config.diffusion.use_identity else None
        pretrained_rsc, self.region_assignment = load_rsc(config, self.device)

        self.model = FaceEditingModel(config)
        self.model.rsc.load_state_dict(pretrained_rsc.state_dict())
        del pretrained_rsc

        params = list(self.model.diffusion.parameters())
        if config.diffusion.freeze_encoder:
            self.model.rsc.requires_grad_(False)
        else:
            params += list(self.model.rsc.parameters())
        self.optimizer = torch.optim.Adam(params, lr=config.diffusion.lr)
        self._prepare()

    def log_record(self, record: Dict[str, float]):
        # diffusion rows carry exactly step, loss_ldm, loss_acr and lr
        with open(self.output_dir / TRAIN_LOG_NAME, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def _batches(self, dataset: PairDataset) -> Iterator[Dict[str, torch.Tensor]]:
        while True:
            for batch in self._loader(dataset, self.config.diffusion.batch_size):
                yield self._to_device(batch)

    @torch.no_grad()
    def _frozen_features(self, batch: Dict[str, torch.Tensor]):
        z0 = self.autoencoder.encode(batch["query"])
        f_r = self.autoencoder.encode(batch["query_render"])
        f_id: Optional[torch.Tensor] = self.embedder(batch["source"]) if self.embedder is not None else None
        return z0, f_r, f_id

    def train(self) -> Path:
        diffusion = self.config.diffusion
        dataset = PairDataset(self.config.paths.data_root, self._records("train"))
        model: FaceEditingModel = self.accelerator.unwrap_model(self.model)
        generator = torch.Generator(device=self.device).manual_seed(self.config.seed)
        batches = self._batches(dataset)

        first = next(batches)
        z0, _, _ = self._frozen_features(first)
        model.diffusion.set_latent_scale(z0)
        self.logger.info(
            f"Training denoiser for {diffusion.max_steps} steps on {len(dataset)} pairs "
            f"(acr_weight {diffusion.acr_weight}, identity {'on' if diffusion.use_identity else 'off'}, "
            f"latent scale {model.diffusion.latent_scale.item():.4f})"
        )

        self.model.train()
        progress = tqdm(total=diffusion.max_steps, desc="Diffusion")
        batch = first
        while self.global_step < diffusion.max_steps:
            z0, f_r, f_id = self._frozen_features(batch)
            if diffusion.freeze_encoder:
                with torch.no_grad():
                    tokens = model.semantic_tokens(batch["source"]).tokens
            else:
                tokens = model.semantic_tokens(batch["source"]).tokens
            query_masks = model.query_masks(batch["query"])

            losses = model.diffusion.losses(z0, f_r, tokens, f_id, query_masks, diffusion.acr_weight, generator)
            self.optimizer.zero_grad()
            self.accelerator.backward(losses.total)
            self.optimizer.step()
            self.global_step += 1
            progress.update(1)
            progress.set_postfix(ldm=f"{losses.loss_ldm.item():.4f}", acr=f"{losses.loss_acr.item():.5f}")

            if self.global_step % diffusion.log_every == 0 or self.global_step == 1:
                self.log_record({"step": self.global_step, "loss_ldm": losses.loss_ldm.item(),
                                 "loss_acr": losses.loss_acr.item(), "lr": self._current_lr()})
            if self.global_step % diffusion.checkpoint_every == 0 and self.global_step < diffusion.max_steps:
                self._save_snapshot()
            batch = next(batches)
        progress.close()
        return self._save_snapshot()

    def _save_snapshot(self) -> Path:
        path = self.save(config_section=asdict(self.config.diffusion),
                         extra={"region_assignment": self.region_assignment, "step": self.global_step})
        self.logger.info(f"Saved diffusion checkpoint at step {self.global_step}: {path}")
        return path

    def cleanup(self):
        self.autoencoder = None
        self.embedder = None
        super().cleanup()
