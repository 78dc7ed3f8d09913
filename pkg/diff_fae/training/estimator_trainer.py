"""
Coefficient estimator training, supervised by the synthetic ground truth.
"""

from dataclasses import asdict
from pathlib import Path
from typing import Dict

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from ..data.dataset import ImageDataset, load_pair_record
from ..models.estimator import CoefficientEstimator
from ..pipeline.components import load_template_for
from .base import BaseTrainer


class EstimatorTrainer(BaseTrainer):
    stage = "estimator"

    def _build_model(self):
        data_root = self.config.paths.data_root
        template = load_template_for(self.config)
        self.model = CoefficientEstimator(
            self.config.estimator, self.config.image_size, template.d_shape, template.d_expr
        )
        records = self._records("train")
        targets = []
        for record in records:
            pair = load_pair_record(data_root, record)
            targets += [pair["source_coeffs"].attribute_vector(), pair["query_coeffs"].attribute_vector()]
        self.model.set_target_statistics(torch.from_numpy(np.stack(targets)).float())
        self.train_records = records
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=self.config.estimator.lr)
        self._prepare()

    def train(self) -> Path:
        estimator = self.config.estimator
        dataset = ImageDataset(self.config.paths.data_root, self.train_records)
        loader = self._loader(dataset, estimator.batch_size)
        model = self.accelerator.unwrap_model(self.model)
        self.logger.info(f"Training coefficient estimator on {len(dataset)} images")

        for epoch in range(estimator.epochs):
            self.model.train()
            progress = tqdm(loader, desc=f"Estimator epoch {epoch + 1}/{estimator.epochs}")
            for batch in progress:
                images, targets = batch["image"].to(self.device), batch["target"].to(self.device)
                loss = F.mse_loss(self.model(images), model.normalize(targets))
                self.optimizer.zero_grad()
                self.accelerator.backward(loss)
                self.optimizer.step()
                self.global_step += 1
                progress.set_postfix(loss=f"{loss.item():.4f}")
                self.log_record({"epoch": epoch, "step": self.global_step, "lr": self._current_lr(),
                                 "loss": loss.item()})

        validation = self.validate()
        self.logger.info(
            "Validation L2 per attribute: " + ", ".join(f"{k}={v:.4f}" for k, v in validation.items())
        )
        return self.save(config_section=asdict(estimator), extra={"validation_l2": validation})

    @torch.no_grad()
    def validate(self) -> Dict[str, float]:
        """Mean L2 error per attribute block on the test split."""
        model = self.accelerator.unwrap_model(self.model)
        model.eval()
        dataset = ImageDataset(self.config.paths.data_root, self._records("test"))
        totals: Dict[str, float] = {name: 0.0 for name in model.slices}
        count = 0
        for batch in self._loader(dataset, self.config.estimator.batch_size, shuffle=False):
            predicted = model.predict(batch["image"].to(self.device))
            target = batch["target"].to(self.device)
            for name, block in model.slices.items():
                totals[name] += torch.linalg.norm(predicted[:, block] - target[:, block], dim=1).sum().item()
            count += target.shape[0]
        return {name: total / count for name, total in totals.items()}
