"""
Identity embedder training with an additive-angular-margin cosine classifier
over the training identities.
"""

from dataclasses import asdict
from pathlib import Path

import torch
import torch.nn.functional as F
from tqdm import tqdm

from ..data.dataset import ImageDataset
from ..models.identity_embedder import ArcMarginHead, IdentityEmbedder
from .base import BaseTrainer


class IdentityTrainer(BaseTrainer):
    stage = "identity"

    def _build_model(self):
        self.dataset = ImageDataset(self.config.paths.data_root, self._records("train"))
        identity = self.config.identity
        if identity.n_classes is not None and identity.n_classes != self.dataset.n_classes:
            raise ValueError(
                f"identity.n_classes={identity.n_classes} does not match the "
                f"{self.dataset.n_classes} identities in the training manifest"
            )
        self.model = IdentityEmbedder(identity, self.config.image_size)
        self.head = ArcMarginHead(identity.embedding_dim, self.dataset.n_classes, identity.margin, identity.scale)
        self.optimizer = torch.optim.Adam(
            list(self.model.parameters()) + list(self.head.parameters()), lr=identity.lr
        )
        self.model, self.head, self.optimizer = self.accelerator.prepare(self.model, self.head, self.optimizer)

    def train(self) -> Path:
        identity = self.config.identity
        loader = self._loader(self.dataset, identity.batch_size)
        self.logger.info(
            f"Training identity embedder on {self.dataset.n_classes} identities "
            f"(margin {identity.margin}, scale {identity.scale})"
        )

        accuracy = 0.0
        for epoch in range(identity.epochs):
            self.model.train()
            correct, seen = 0, 0
            progress = tqdm(loader, desc=f"ID epoch {epoch + 1}/{identity.epochs}")
            for batch in progress:
                images, labels = batch["image"].to(self.device), batch["label"].to(self.device)
                logits = self.head(self.model(images), labels)
                loss = F.cross_entropy(logits, labels)
                self.optimizer.zero_grad()
                self.accelerator.backward(loss)
                self.optimizer.step()
                self.global_step += 1

                correct += (logits.argmax(dim=1) == labels).sum().item()
                seen += labels.numel()
                progress.set_postfix(loss=f"{loss.item():.4f}", acc=f"{correct / seen:.3f}")
                self.log_record({"epoch": epoch, "step": self.global_step, "lr": self._current_lr(),
                                 "loss": loss.item()})
            accuracy = correct / max(seen, 1)
            self.logger.info(f"Epoch {epoch + 1}: training accuracy {accuracy:.3f}")

        self.accelerator.unwrap_model(self.model).mark_trained()
        return self.save(config_section=asdict(identity),
                         extra={"train_accuracy": accuracy, "n_classes": self.dataset.n_classes})

    def cleanup(self):
        if getattr(self, "head", None) is not None:
            del self.head
            self.head = None
        super().cleanup()
