"""
Dataset synthesis to disk and torch datasets over the resulting manifest.
"""

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch
from torch.utils.data import Dataset
from tqdm import tqdm

from ..geometry.coefficients import PhysicalCoefficients
from ..geometry.flame_lite import HeadTemplate, load_template, save_template
from ..utils.checkpoint import load_container, save_container
from ..utils.image_io import load_png, save_png
from .synth_data import make_pair, sample_identity

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
TEMPLATE_NAME = "template.safetensors"
TRAIN_FRACTION = 0.8
IDENTITY_SEED_STRIDE = 100_000


@dataclass
class ManifestRecord:
    pair_id: str
    identity_id: int
    split: str
    paths: Dict[str, str]


def split_identities(identity_ids: Sequence[int], split_seed: int) -> Dict[int, str]:
    """8:2 identity-level split; no identity lands in both."""
    if len(identity_ids) < 5:
        raise ValueError(f"Need at least 5 identities for an 8:2 split, got {len(identity_ids)}")
    order = np.random.default_rng(split_seed).permutation(len(identity_ids))
    n_train = int(round(TRAIN_FRACTION * len(identity_ids)))
    return {int(identity_ids[i]): ("train" if rank < n_train else "test") for rank, i in enumerate(order)}


def _write_identity(
    data_root: str,
    template: HeadTemplate,
    identity_seed: int,
    split: str,
    pairs_per_identity: int,
    image_size: int,
    max_yaw_deg: float,
) -> List[ManifestRecord]:
    root = Path(data_root)
    identity = sample_identity(identity_seed, template.d_shape, template.d_albedo)
    records = []
    for j in range(pairs_per_identity):
        pair = make_pair(template, identity, j, image_size, image_size, max_yaw_deg)
        pair_dir = Path("pairs") / pair.pair_id
        paths = {
            "source": str(pair_dir / "source.png"),
            "query": str(pair_dir / "query.png"),
            "source_render": str(pair_dir / "source_render.png"),
            "query_render": str(pair_dir / "query_render.png"),
            "record": str(pair_dir / "record.safetensors"),
        }
        save_png(root / paths["source"], pair.source_image)
        save_png(root / paths["query"], pair.query_image)
        save_png(root / paths["source_render"], pair.source_render)
        save_png(root / paths["query_render"], pair.query_render)
        arrays = {
            **pair.source_coeffs.to_arrays("source_"),
            **pair.query_coeffs.to_arrays("query_"),
            "source_mask": pair.source_mask,
            "query_mask": pair.query_mask,
        }
        save_container(root / paths["record"], arrays, kind="sample_pair",
                       metadata={"pair_id": pair.pair_id, "identity_id": pair.identity_id})
        records.append(ManifestRecord(pair.pair_id, pair.identity_id, split, paths))
    return records


def build_dataset(
    data_root: Union[str, Path],
    template: HeadTemplate,
    n_identities: int,
    pairs_per_identity: int,
    split_seed: int = 0,
    image_size: int = 64,
    max_yaw_deg: float = 60.0,
    num_workers: int = 0,
) -> List[ManifestRecord]:
    """
    Synthesize the paired-portrait dataset and write its manifest.

    Args:
        data_root: Output directory
        template: Head model used for every render
        n_identities: Number of synthetic identities (>= 5)
        pairs_per_identity: Source/query pairs per identity
        split_seed: Seed of the identity split and of identity sampling
        image_size: Square image side
        max_yaw_deg: Yaw bound of the pose sampler
        num_workers: Worker processes; 0 synthesizes in-process

    Returns:
        Manifest records in identity order
    """
    if pairs_per_identity < 1:
        raise ValueError(f"pairs_per_identity must be >= 1, got {pairs_per_identity}")
    data_root = Path(data_root)
    data_root.mkdir(parents=True, exist_ok=True)

    identity_seeds = [split_seed * IDENTITY_SEED_STRIDE + i for i in range(n_identities)]
    splits = split_identities(identity_seeds, split_seed)
    save_template(template, data_root / TEMPLATE_NAME)

    jobs = [
        (str(data_root), template, seed, splits[seed], pairs_per_identity, image_size, max_yaw_deg)
        for seed in identity_seeds
    ]
    records: List[ManifestRecord] = []
    if num_workers > 0:
        with ProcessPoolExecutor(max_workers=num_workers) as executor:
            futures = [executor.submit(_write_identity, *job) for job in jobs]
            for future in tqdm(futures, desc="Synthesizing identities"):
                records.extend(future.result())
    else:
        for job in tqdm(jobs, desc="Synthesizing identities"):
            records.extend(_write_identity(*job))

    write_manifest(data_root / MANIFEST_NAME, records)
    n_train = sum(1 for split in splits.values() if split == "train")
    logger.info(
        f"Wrote {len(records)} pairs for {n_identities} identities "
        f"({n_train} train / {n_identities - n_train} test) to {data_root}"
    )
    return records


def write_manifest(path: Union[str, Path], records: Sequence[ManifestRecord]) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(asdict(record), sort_keys=True) + "\n")
    return path


def load_manifest(data_root: Union[str, Path], split: Optional[str] = None) -> List[ManifestRecord]:
    """Read manifest records, optionally keeping one split."""
    path = Path(data_root) / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"Manifest not found: {path}")
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                records.append(ManifestRecord(**json.loads(line)))
    if split is not None:
        records = [r for r in records if r.split == split]
    return records


def load_dataset_template(data_root: Union[str, Path]) -> HeadTemplate:
    return load_template(Path(data_root) / TEMPLATE_NAME)


def load_pair_record(data_root: Union[str, Path], record: ManifestRecord) -> Dict[str, object]:
    """Coefficients and masks of one pair."""
    arrays, _ = load_container(Path(data_root) / record.paths["record"], kind="sample_pair", as_numpy=True)
    return {
        "source_coeffs": PhysicalCoefficients.from_arrays(arrays, "source_"),
        "query_coeffs": PhysicalCoefficients.from_arrays(arrays, "query_"),
        "source_mask": arrays["source_mask"],
        "query_mask": arrays["query_mask"],
    }


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float()


class PairDataset(Dataset):
    """Source/query pairs with the query's conditioning render and region masks."""

    def __init__(self, data_root: Union[str, Path], records: Sequence[ManifestRecord]):
        if not records:
            raise ValueError("PairDataset needs a non-empty manifest")
        self.data_root = Path(data_root)
        self.records = list(records)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int) -> Dict[str, torch.Tensor]:
        record = self.records[index]
        extra = load_pair_record(self.data_root, record)
        return {
            "source": image_to_tensor(load_png(self.data_root / record.paths["source"])),
            "query": image_to_tensor(load_png(self.data_root / record.paths["query"])),
            "query_render": image_to_tensor(load_png(self.data_root / record.paths["query_render"])),
            "query_mask": torch.from_numpy(extra["query_mask"].astype(np.int64)),
            "identity_id": torch.tensor(record.identity_id),
        }


class ImageDataset(Dataset):
    """
    Every frame of the manifest as a single image sample.

    Each item carries the image, its region mask, its attribute regression
    target and a class index over the identities present in ``records``.
    Both frames of a pair share one record file, which is read once and kept.
    """

    def __init__(self, data_root: Union[str, Path], records: Sequence[ManifestRecord]):
        if not records:
            raise ValueError("ImageDataset needs a non-empty manifest")
        self.data_root = Path(data_root)
        self.records = list(records)
        self.identity_ids = sorted({r.identity_id for r in self.records})
        self.class_index = {identity: i for i, identity in enumerate(self.identity_ids)}
        self._pairs: Dict[int, Dict[str, object]] = {}

    @property
    def n_classes(self) -> int:
        return len(self.identity_ids)

    def __len__(self) -> int:
        return 2 * len(self.records)

    def pair_arrays(self, record_index: int) -> Dict[str, object]:
        if record_index not in self._pairs:
            self._pairs[record_index] = load_pair_record(self.data_root, self.records[record_index])
        return self._pairs[record_index]

    def __getitem__(self, index: int) -> Dict[str, torch.Tensor]:
        record = self.records[index // 2]
        role = "source" if index % 2 == 0 else "query"
        extra = self.pair_arrays(index // 2)
        coeffs: PhysicalCoefficients = extra[f"{role}_coeffs"]
        return {
            "image": image_to_tensor(load_png(self.data_root / record.paths[role])),
            "mask": torch.from_numpy(extra[f"{role}_mask"].astype(np.int64)),
            "target": torch.from_numpy(coeffs.attribute_vector()).float(),
            "label": torch.tensor(self.class_index[record.identity_id]),
        }
