"""
Region encoder pretraining by unsupervised image reconstruction, followed by
a post-hoc token-to-region assignment against the synthetic masks.
"""

from dataclasses import asdict
from pathlib import Path
from typing import Dict, Tuple

import numpy as np
import torch
from tqdm import tqdm

from ..data.dataset import ImageDataset
from ..evaluation.metrics import describe_assignment, hungarian_miou, region_assignment
from ..models.rsc_encoder import RSCEncoder
from .base import BaseTrainer

ASSIGNMENT_IMAGES = 512


class RSCTrainer(BaseTrainer):
    stage = "rsc"

    def _build_model(self):
        rsc = self.config.rsc
        self.model = RSCEncoder(rsc, self.config.image_size)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=rsc.lr)
        warmup = max(rsc.warmup_steps, 1)
        self.scheduler = torch.optim.lr_scheduler.LambdaLR(
            self.optimizer, lambda step: min(1.0, (step + 1) / warmup)
        )
        self._prepare()

    def train(self) -> Path:
        rsc = self.config.rsc
        dataset = ImageDataset(self.config.paths.data_root, self._records("train"))
        loader = self._loader(dataset, rsc.batch_size)
        generator = torch.Generator(device=self.device).manual_seed(self.config.seed)
        self.logger.info(f"Pretraining region encoder with {rsc.num_slots} tokens on {len(dataset)} images")

        for epoch in range(rsc.epochs):
            self.model.train()
            progress = tqdm(loader, desc=f"RSC epoch {epoch + 1}/{rsc.epochs}")
            for batch in progress:
                images = batch["image"].to(self.device)
                loss = self.model.reconstruction_loss(images, generator=generator)
                self.optimizer.zero_grad()
                self.accelerator.backward(loss)
                self.optimizer.step()
                self.scheduler.step()
                self.global_step += 1
                progress.set_postfix(mse=f"{loss.item():.5f}")
                self.log_record({"epoch": epoch, "step": self.global_step, "lr": self._current_lr(),
                                 "loss_mse": loss.item()})

        assignment, miou = self.assign_regions(dataset)
        self.logger.info(f"Token assignment: {describe_assignment(assignment)} (train mIoU {miou:.3f})")
        return self.save(config_section=asdict(rsc), extra={"region_assignment": assignment, "train_miou": miou})

    @torch.no_grad()
    def assign_regions(self, dataset: ImageDataset) -> Tuple[Dict[str, int], float]:
        """Hungarian token-to-region assignment over (up to) the first training images."""
        model = self.accelerator.unwrap_model(self.model)
        model.eval()
        preds, masks = [], []
        for batch in self._loader(dataset, self.config.rsc.batch_size, shuffle=False):
            soft = model.slot_masks(batch["image"].to(self.device))
            preds.append(soft.argmax(dim=1).cpu().numpy())
            masks.append(batch["mask"].numpy())
            if sum(len(p) for p in preds) >= ASSIGNMENT_IMAGES:
                break
        pred, gt = np.concatenate(preds), np.concatenate(masks)
        return region_assignment(pred, gt, model.num_slots), hungarian_miou(pred, gt, model.num_slots)
