"""
Latent autoencoder training: L1 reconstruction plus VQ codebook/commitment terms.
"""

from dataclasses import asdict
from pathlib import Path

import torch
from tqdm import tqdm

from ..data.dataset import ImageDataset
from ..models.latent_ae import LatentAutoencoder, codebook_usage
from .base import BaseTrainer

MIN_CODEBOOK_USAGE = 0.25


class AutoencoderTrainer(BaseTrainer):
    stage = "latent_ae"

    def _build_model(self):
        ae = self.config.ae
        self.model = LatentAutoencoder(ae, self.config.image_size)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=ae.lr)
        self._prepare()

    def train(self) -> Path:
        ae = self.config.ae
        dataset = ImageDataset(self.config.paths.data_root, self._records("train"))
        loader = self._loader(dataset, ae.batch_size)
        self.logger.info(f"Training latent autoencoder ({ae.mode} mode) on {len(dataset)} images")

        usage = float("nan")
        for epoch in range(ae.epochs):
            self.model.train()
            epoch_indices = []
            progress = tqdm(loader, desc=f"AE epoch {epoch + 1}/{ae.epochs}")
            for batch in progress:
                images = batch["image"].to(self.device)
                loss, parts = self.model.loss(images)
                self.optimizer.zero_grad()
                self.accelerator.backward(loss)
                self.optimizer.step()
                self.global_step += 1

                if parts["indices"] is not None:
                    epoch_indices.append(parts["indices"].detach().cpu())
                progress.set_postfix(loss=f"{loss.item():.4f}")
                self.log_record({
                    "epoch": epoch, "step": self.global_step, "lr": self._current_lr(),
                    "loss": loss.item(), "loss_l1": parts["loss_l1"], "loss_vq": parts["loss_vq"],
                })

            if epoch_indices:
                usage = codebook_usage(epoch_indices, ae.codebook_size)
                self.logger.info(f"Epoch {epoch + 1}: codebook usage {usage:.1%}")

        if ae.mode == "vq" and usage < MIN_CODEBOOK_USAGE:
            self.logger.warning(
                f"Only {usage:.1%} of the {ae.codebook_size} codewords are in use "
                f"(below {MIN_CODEBOOK_USAGE:.0%}); consider a smaller codebook"
            )
        return self.save(config_section=asdict(ae), extra={"codebook_usage": usage})
