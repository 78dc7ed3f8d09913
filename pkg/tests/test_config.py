from dataclasses import replace

import pytest
import yaml

from diff_fae.utils.config_loader import (
    build_run_config,
    config_digest,
    load_config,
    merge_configs,
    save_config,
    validate_config,
)
from diff_fae.utils.errors import ConfigError


def test_desk_defaults_validate():
    config = build_run_config()
    assert config.preset == "desk"
    assert config.image_size == 64
    assert validate_config(config)


def test_paper_preset_loads():
    config = build_run_config(preset="paper")
    assert config.preset == "paper"
    assert config.image_size == 256
    assert config.latent_size == 32


def test_unknown_preset_raises():
    with pytest.raises(ConfigError, match="Unknown preset"):
        build_run_config(preset="studio")


def test_context_dim_mismatch_names_both_fields():
    with pytest.raises(ConfigError) as info:
        build_run_config(overrides={"diffusion": {"context_dim": 7}})
    assert "diffusion.context_dim" in str(info.value)
    assert "rsc.slot_dim" in str(info.value)


def test_ddim_steps_cannot_exceed_timesteps():
    with pytest.raises(ConfigError, match="ddim_steps"):
        build_run_config(overrides={"diffusion": {"timesteps": 10, "ddim_steps": 20}})


def test_unknown_keys_raise():
    with pytest.raises(ConfigError, match="Unknown configuration keys"):
        build_run_config(overrides={"colour": "red"})
    with pytest.raises(ConfigError, match="section 'rsc'"):
        build_run_config(overrides={"rsc": {"num_tokens": 4}})


def test_user_file_is_merged_over_preset(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({"seed": 5, "diffusion": {"acr_weight": 0.0}}))
    config = build_run_config(str(path))
    assert config.seed == 5
    assert config.diffusion.acr_weight == 0.0
    assert config.diffusion.timesteps == build_run_config().diffusion.timesteps


def test_missing_user_file_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        build_run_config(str(tmp_path / "absent.yaml"))


def test_invalid_yaml_raises(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("seed: [1, 2\n")
    with pytest.raises(ConfigError, match="Invalid YAML"):
        load_config(str(path))


def test_environment_overrides_paths(monkeypatch, tmp_path):
    monkeypatch.setenv("DIFF_FAE_DATA_ROOT", str(tmp_path / "elsewhere"))
    config = build_run_config(overrides={"paths": {"data_root": "ignored"}})
    assert config.paths.data_root == str(tmp_path / "elsewhere")


def test_merge_is_recursive_and_leaves_inputs_alone():
    base = {"a": {"b": 1, "c": 2}, "d": 3}
    merged = merge_configs(base, {"a": {"c": 5}})
    assert merged == {"a": {"b": 1, "c": 5}, "d": 3}
    assert base["a"]["c"] == 2


def test_saved_config_reloads(tmp_path):
    config = build_run_config(overrides={"seed": 11})
    path = tmp_path / "saved.yaml"
    save_config(config.to_dict(), str(path))
    assert build_run_config(str(path)) == config


def test_digest_ignores_training_only_keys():
    config = build_run_config()
    tweaked = replace(config, diffusion=replace(config.diffusion, lr=1e-3, max_steps=7, acr_weight=0.0))
    assert config_digest(config, "diffusion") == config_digest(tweaked, "diffusion")


def test_digest_follows_architecture():
    config = build_run_config()
    wider = replace(config, diffusion=replace(config.diffusion, base_channels=config.diffusion.base_channels * 2))
    assert config_digest(config, "diffusion") != config_digest(wider, "diffusion")
    assert config_digest(config, "latent_ae") == config_digest(wider, "latent_ae")


def test_digest_rejects_unknown_stage():
    with pytest.raises(ValueError, match="Unknown stage"):
        config_digest(build_run_config(), "vocoder")
