"""
Base abstract trainer shared by every training stage.
"""

import json
import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Dict, List, Optional

import torch
from accelerate import Accelerator
from accelerate.utils import set_seed
from torch.utils.data import DataLoader, Dataset

from ..data.dataset import ManifestRecord, load_manifest
from ..utils.checkpoint import STAGE_COMMANDS, save_checkpoint, stage_checkpoint
from ..utils.config_loader import RunConfig, config_digest
from ..utils.errors import MissingPrerequisiteError

logger = logging.getLogger(__name__)

TRAIN_LOG_NAME = "train_log.jsonl"


def resolve_device(config: RunConfig) -> bool:
    """True when the run is pinned to the CPU."""
    if config.device == "cpu":
        return True
    if config.device == "cuda" and not torch.cuda.is_available():
        raise RuntimeError("device 'cuda' requested but CUDA is not available")
    return False


class BaseTrainer(ABC):
    """
    Abstract base class for stage trainers.

    Subclasses build their model and optimizer in ``_build_model`` and run
    their loop in ``train``; the base class owns seeding, the accelerator,
    data loaders, the training log and checkpoint writing.
    """

    stage: str = ""

    def __init__(self, config: RunConfig):
        """
        Initialize the trainer.

        Args:
            config: Validated run configuration
        """
        self.config = config
        self.logger = logging.getLogger(self.__class__.__module__)
        self.accelerator = Accelerator(cpu=resolve_device(config))
        set_seed(config.seed)
        if config.deterministic:
            torch.use_deterministic_algorithms(True, warn_only=True)
        self.model: Optional[torch.nn.Module] = None
        self.optimizer: Optional[torch.optim.Optimizer] = None
        self.global_step = 0
        self.output_dir = Path(config.paths.output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self._build_model()

    @property
    def device(self) -> torch.device:
        return self.accelerator.device

    @property
    def digest(self) -> str:
        return config_digest(self.config, self.stage)

    @property
    def checkpoint_path(self) -> Path:
        return stage_checkpoint(self.config, self.stage)

    @abstractmethod
    def _build_model(self):
        """Create ``self.model`` and ``self.optimizer``."""
        pass

    @abstractmethod
    def train(self) -> Path:
        """
        Run the training loop and write the checkpoint.

        Returns:
            Path of the written checkpoint
        """
        pass

    def _prepare(self):
        self.model, self.optimizer = self.accelerator.prepare(self.model, self.optimizer)

    def _records(self, split: Optional[str] = "train") -> List[ManifestRecord]:
        data_root = Path(self.config.paths.data_root)
        try:
            records = load_manifest(data_root, split)
        except FileNotFoundError:
            raise MissingPrerequisiteError(str(data_root / "manifest.jsonl"), STAGE_COMMANDS["dataset"])
        if not records:
            raise ValueError(f"Manifest under {data_root} has no '{split}' records")
        return records

    def _loader(self, dataset: Dataset, batch_size: int, shuffle: bool = True) -> DataLoader:
        generator = torch.Generator().manual_seed(self.config.seed)
        return DataLoader(dataset, batch_size=batch_size, shuffle=shuffle, generator=generator,
                          num_workers=0, drop_last=False)

    def _to_device(self, batch: Dict[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
        return {key: value.to(self.device) for key, value in batch.items()}

    def _current_lr(self) -> float:
        return float(self.optimizer.param_groups[0]["lr"])

    def log_record(self, record: Dict[str, Any]):
        """Append one JSON line to the training log."""
        with open(self.output_dir / TRAIN_LOG_NAME, "a", encoding="utf-8") as f:
            f.write(json.dumps({"stage": self.stage, **record}, sort_keys=True) + "\n")

    def save(self, module: Optional[torch.nn.Module] = None, config_section: Optional[Dict[str, Any]] = None,
             extra: Optional[Dict[str, Any]] = None) -> Path:
        module = self.accelerator.unwrap_model(module if module is not None else self.model)
        return save_checkpoint(self.checkpoint_path, module, kind=self.stage, digest=self.digest,
                               config_section=config_section, extra=extra)

    def cleanup(self):
        """
        Release the model, optimizer and accelerator state.
        """
        if self.model is not None:
            del self.model
            self.model = None
        if self.optimizer is not None:
            del self.optimizer
            self.optimizer = None
        self.accelerator.free_memory()

    def __enter__(self):
        """Context manager entry."""
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        """Context manager exit."""
        self.cleanup()
