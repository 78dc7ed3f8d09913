"""
Shared fixtures: a tiny CPU configuration, a small head template and a
ten-identity synthetic dataset built once per session.
"""

from pathlib import Path
from typing import Any, Dict

import pytest
import yaml

from diff_fae.data.dataset import build_dataset
from diff_fae.geometry.flame_lite import make_toy_template
from diff_fae.utils.config_loader import ENV_PATH_OVERRIDES, build_run_config

TINY_IMAGE_SIZE = 32
TINY_IDENTITIES = 10


def tiny_overrides(data_root: Path, run_root: Path) -> Dict[str, Any]:
    """Architecture small enough to train every stage on the CPU in seconds."""
    return {
        "seed": 0,
        "image_size": TINY_IMAGE_SIZE,
        "device": "cpu",
        "paths": {
            "data_root": str(data_root),
            "checkpoint_dir": str(run_root / "checkpoints"),
            "output_dir": str(run_root / "outputs"),
        },
        "synth": {
            "n_identities": TINY_IDENTITIES,
            "pairs_per_identity": 1,
            "n_vertices": 162,
            "d_shape": 4,
            "d_expr": 4,
            "d_albedo": 3,
        },
        "ae": {"base_channels": 8, "channel_multipliers": [1, 1, 1, 1], "codebook_size": 16, "code_dim": 4,
               "epochs": 1, "batch_size": 4},
        "rsc": {"output_resolution": 16, "base_channels": 8, "channel_multipliers": [1, 1], "num_res_blocks": 1,
                "num_heads": 2, "out_channels": 16, "slot_dim": 16, "num_slots": 4, "num_iterations": 2,
                "mlp_hidden_dim": 16, "decoder_channels": 8, "epochs": 1, "batch_size": 4, "warmup_steps": 1},
        "identity": {"embedding_dim": 8, "base_channels": 8, "epochs": 1, "batch_size": 4},
        "estimator": {"base_channels": 8, "epochs": 1, "batch_size": 4},
        "diffusion": {"base_channels": 16, "channel_multipliers": [1, 2], "num_res_blocks": 1,
                      "attention_resolutions": [4, 2], "num_heads": 2, "context_dim": 16, "timesteps": 50,
                      "ddim_steps": 4, "batch_size": 4, "max_steps": 2, "log_every": 1, "checkpoint_every": 100},
        "evaluation": {"n_samples": 4, "attention_timesteps": 2},
    }


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    for name in ENV_PATH_OVERRIDES:
        monkeypatch.delenv(name, raising=False)


@pytest.fixture(scope="session")
def template():
    return make_toy_template(seed=7, n_vertices=162, d_shape=4, d_expr=4, d_albedo=3)


@pytest.fixture(scope="session")
def data_root(tmp_path_factory, template) -> Path:
    root = tmp_path_factory.mktemp("synth")
    build_dataset(root, template, TINY_IDENTITIES, 1, split_seed=0, image_size=TINY_IMAGE_SIZE)
    return root


@pytest.fixture
def tiny_config(tmp_path, data_root):
    return build_run_config(overrides=tiny_overrides(data_root, tmp_path))


@pytest.fixture
def empty_config(tmp_path):
    """Tiny configuration whose data root holds nothing."""
    return build_run_config(overrides=tiny_overrides(tmp_path / "no_data", tmp_path))


def write_config(path: Path, overrides: Dict[str, Any]) -> str:
    path.write_text(yaml.safe_dump(overrides), encoding="utf-8")
    return str(path)


@pytest.fixture
def tiny_config_file(tmp_path, data_root) -> str:
    return write_config(tmp_path / "tiny.yaml", tiny_overrides(data_root, tmp_path))
