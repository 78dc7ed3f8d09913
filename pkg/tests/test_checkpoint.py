from dataclasses import replace

import numpy as np
import pytest
import torch

from diff_fae.pipeline.components import load_editing_model
from diff_fae.utils.checkpoint import (
    checkpoint_suffix,
    load_checkpoint,
    load_container,
    read_metadata_json,
    save_checkpoint,
    save_container,
    stage_checkpoint,
)
from diff_fae.utils.errors import CheckpointMismatchError, MissingPrerequisiteError


def make_linear(seed: int) -> torch.nn.Linear:
    torch.manual_seed(seed)
    return torch.nn.Linear(3, 2)


def test_checkpoint_restores_weights(tmp_path):
    source = make_linear(0)
    path = save_checkpoint(tmp_path / "lin.safetensors", source, kind="linear", digest="d1",
                           extra={"region_assignment": {"face": 1}})
    target = make_linear(1)
    metadata = load_checkpoint(path, target, kind="linear", digest="d1")
    torch.testing.assert_close(target.weight, source.weight)
    assert read_metadata_json(metadata, "region_assignment") == {"face": 1}
    assert read_metadata_json(metadata, "absent", default=3) == 3


def test_digest_mismatch_is_refused(tmp_path):
    path = save_checkpoint(tmp_path / "lin.safetensors", make_linear(0), kind="linear", digest="d1")
    with pytest.raises(CheckpointMismatchError) as info:
        load_checkpoint(path, make_linear(1), kind="linear", digest="d2")
    assert info.value.expected_digest == "d2" and info.value.found_digest == "d1"


def test_wrong_kind_is_refused(tmp_path):
    path = save_checkpoint(tmp_path / "lin.safetensors", make_linear(0), kind="linear", digest="d1")
    with pytest.raises(ValueError, match="expected 'rsc'"):
        load_checkpoint(path, make_linear(1), kind="rsc")


def test_missing_checkpoint_names_producing_command(tmp_path):
    with pytest.raises(MissingPrerequisiteError, match="run `train-ae` first") as info:
        load_checkpoint(tmp_path / "absent.safetensors", make_linear(0), kind="latent_ae", stage="train-ae")
    assert info.value.stage == "train-ae"


def test_container_keeps_numpy_dtypes(tmp_path):
    arrays = {"faces": np.arange(6, dtype=np.int64).reshape(2, 3), "basis": np.ones((2, 2), dtype=np.float64)}
    path = save_container(tmp_path / "c.safetensors", arrays, kind="template", metadata={"seed": 7})
    restored, metadata = load_container(path, kind="template", as_numpy=True)
    assert restored["faces"].dtype == np.int64 and restored["basis"].dtype == np.float64
    np.testing.assert_array_equal(restored["faces"], arrays["faces"])
    assert read_metadata_json(metadata, "seed") == 7


def test_foreign_safetensors_file_is_refused(tmp_path):
    from safetensors.torch import save_file

    path = tmp_path / "foreign.safetensors"
    save_file({"x": torch.zeros(1)}, str(path))
    with pytest.raises(ValueError, match="not a diff_fae container"):
        load_container(path)


def test_default_checkpoints_have_no_suffix(tiny_config):
    assert stage_checkpoint(tiny_config, "diffusion").name == "diffusion.safetensors"
    assert checkpoint_suffix(tiny_config, "latent_ae") == ""


def test_ablation_checkpoints_are_suffixed(tiny_config):
    config = replace(
        tiny_config,
        rsc=replace(tiny_config.rsc, num_slots=8),
        diffusion=replace(tiny_config.diffusion, acr_weight=0.0, use_identity=False),
    )
    assert stage_checkpoint(config, "rsc").name == "rsc_slots8.safetensors"
    assert stage_checkpoint(config, "diffusion").name == "diffusion_slots8_acr0_noid.safetensors"
    assert checkpoint_suffix(config, "identity") == ""


def test_editing_model_requires_trained_denoiser(tiny_config):
    with pytest.raises(MissingPrerequisiteError, match="train-diffusion"):
        load_editing_model(tiny_config, torch.device("cpu"))
