"""
Versioned binary container shared by templates, dataset records and model
checkpoints.

A container is a safetensors file: named arrays with dtype and shape in its
header, plus string metadata carrying the format version, the artifact kind
and, for checkpoints, the config digest they were trained under.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np
import torch
from safetensors import safe_open
from safetensors.torch import save_file

from .config_loader import RunConfig
from .errors import CheckpointMismatchError, MissingPrerequisiteError

logger = logging.getLogger(__name__)

FORMAT_NAME = "diff_fae"
FORMAT_VERSION = "1"

ArrayLike = Union[np.ndarray, torch.Tensor]


def _as_tensor(value: ArrayLike) -> torch.Tensor:
    if isinstance(value, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(value)).clone()
    return value.detach().cpu().contiguous().clone()


def save_container(
    path: Union[str, Path],
    arrays: Mapping[str, ArrayLike],
    kind: str,
    metadata: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    Write named arrays and metadata to a container file.

    Args:
        path: Destination file
        arrays: Name to array mapping (numpy arrays or tensors)
        kind: Artifact kind stored in the header (e.g. ``template``)
        metadata: Extra metadata; non-string values are JSON encoded

    Returns:
        The written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    header = {"format": FORMAT_NAME, "format_version": FORMAT_VERSION, "kind": kind}
    for key, value in (metadata or {}).items():
        header[key] = value if isinstance(value, str) else json.dumps(value, sort_keys=True)

    tensors = {name: _as_tensor(value) for name, value in arrays.items()}
    save_file(tensors, str(path), metadata=header)
    logger.debug(f"Wrote {kind} container with {len(tensors)} arrays to {path}")
    return path


def load_container(
    path: Union[str, Path],
    kind: Optional[str] = None,
    as_numpy: bool = False,
) -> Tuple[Dict[str, Any], Dict[str, str]]:
    """
    Read a container file.

    Args:
        path: Container file
        kind: Expected artifact kind, checked when given
        as_numpy: Return numpy arrays instead of tensors

    Returns:
        Tuple of (arrays, metadata)
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Container not found: {path}")

    with safe_open(str(path), framework="pt") as f:
        metadata = dict(f.metadata() or {})
        arrays = {name: f.get_tensor(name) for name in f.keys()}

    if metadata.get("format") != FORMAT_NAME:
        raise ValueError(f"{path} is not a {FORMAT_NAME} container")
    if metadata.get("format_version") != FORMAT_VERSION:
        raise ValueError(
            f"{path} has container version {metadata.get('format_version')}, expected {FORMAT_VERSION}"
        )
    if kind is not None and metadata.get("kind") != kind:
        raise ValueError(f"{path} holds a '{metadata.get('kind')}' container, expected '{kind}'")

    if as_numpy:
        arrays = {name: value.numpy() for name, value in arrays.items()}
    return arrays, metadata


def save_checkpoint(
    path: Union[str, Path],
    model: torch.nn.Module,
    kind: str,
    digest: str,
    config_section: Optional[Dict[str, Any]] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """Save a model ``state_dict`` tagged with its config digest."""
    metadata: Dict[str, Any] = {"config_digest": digest}
    if config_section is not None:
        metadata["config_json"] = config_section
    metadata.update(extra or {})
    path = save_container(path, model.state_dict(), kind=kind, metadata=metadata)
    logger.info(f"Saved {kind} checkpoint to {path}")
    return path


def load_checkpoint(
    path: Union[str, Path],
    model: torch.nn.Module,
    kind: str,
    digest: Optional[str] = None,
    stage: Optional[str] = None,
) -> Dict[str, str]:
    """
    Load weights into ``model`` after checking kind and config digest.

    Args:
        path: Checkpoint file
        model: Module receiving the weights
        kind: Expected checkpoint kind
        digest: Expected config digest; skipped when None
        stage: CLI command producing this checkpoint, named in the error
            raised when the file is missing

    Returns:
        The checkpoint metadata
    """
    path = Path(path)
    if not path.exists():
        raise MissingPrerequisiteError(str(path), stage)

    state, metadata = load_container(path, kind=kind)
    found = metadata.get("config_digest", "")
    if digest is not None and found != digest:
        raise CheckpointMismatchError(str(path), digest, found)

    model.load_state_dict(state)
    logger.info(f"Loaded {kind} checkpoint from {path}")
    return metadata


def read_metadata_json(metadata: Dict[str, str], key: str, default: Any = None) -> Any:
    """Decode a JSON-encoded metadata entry."""
    if key not in metadata:
        return default
    return json.loads(metadata[key])


STAGE_COMMANDS = {
    "dataset": "synth-data",
    "latent_ae": "train-ae",
    "rsc": "pretrain-rsc",
    "identity": "train-id",
    "estimator": "train-estimator",
    "diffusion": "train-diffusion",
}


def checkpoint_suffix(config: RunConfig, stage: str) -> str:
    """Name suffix keeping ablation checkpoints next to the default ones."""
    suffix = ""
    if stage in ("rsc", "diffusion") and config.rsc.num_slots != 4:
        suffix += f"_slots{config.rsc.num_slots}"
    if stage == "diffusion":
        if config.diffusion.acr_weight != 0.1:
            suffix += f"_acr{config.diffusion.acr_weight:g}"
        if not config.diffusion.use_identity:
            suffix += "_noid"
    return suffix


def stage_checkpoint(config: RunConfig, stage: str) -> Path:
    return Path(config.paths.checkpoint_dir) / f"{stage}{checkpoint_suffix(config, stage)}.safetensors"
