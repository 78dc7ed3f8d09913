"""
Configuration loader utilities for DiffFAE.

Run configurations are YAML files layered as: built-in defaults (the desk
preset), the named preset file under ``configs/``, the user file, explicit
overrides, then environment variables for paths.
"""

import copy
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from .errors import ConfigError

logger = logging.getLogger(__name__)

CONFIG_DIR = Path(__file__).resolve().parents[2] / "configs"
PRESETS = ("desk", "paper")

ENV_PATH_OVERRIDES = {
    "DIFF_FAE_DATA_ROOT": "data_root",
    "DIFF_FAE_CHECKPOINT_DIR": "checkpoint_dir",
    "DIFF_FAE_OUTPUT_DIR": "output_dir",
}

# Keys that only steer optimization; checkpoints stay loadable when they change.
TRAINING_ONLY_KEYS = {
    "epochs", "batch_size", "lr", "max_steps", "log_every", "checkpoint_every",
    "warmup_steps", "ddim_steps", "acr_weight", "freeze_encoder", "num_workers",
    "weight_decay",
}

STAGE_SECTIONS = {
    "template": ["synth"],
    "latent_ae": ["ae"],
    "rsc": ["rsc"],
    "identity": ["identity"],
    "estimator": ["estimator", "synth"],
    "diffusion": ["diffusion", "ae", "rsc", "identity"],
}


@dataclass
class PathsConfig:
    data_root: str = "data/synth"
    checkpoint_dir: str = "checkpoints"
    output_dir: str = "outputs"


@dataclass
class SynthConfig:
    n_identities: int = 200
    pairs_per_identity: int = 20
    n_vertices: int = 642
    d_shape: int = 10
    d_expr: int = 10
    d_albedo: int = 8
    template_seed: int = 7
    max_yaw_deg: float = 60.0
    num_workers: int = 0


@dataclass
class AEConfig:
    base_channels: int = 64
    channel_multipliers: List[int] = field(default_factory=lambda: [1, 2, 2, 4])
    num_res_blocks: int = 1
    codebook_size: int = 512
    code_dim: int = 4
    commitment: float = 0.25
    mode: str = "vq"
    diffusion_latent: str = "continuous"
    epochs: int = 10
    batch_size: int = 32
    lr: float = 2e-4


@dataclass
class RscConfig:
    output_resolution: int = 8
    base_channels: int = 64
    channel_multipliers: List[int] = field(default_factory=lambda: [1, 1, 2, 4])
    num_res_blocks: int = 2
    num_heads: int = 8
    out_channels: int = 192
    num_iterations: int = 3
    slot_dim: int = 192
    num_slots: int = 4
    mlp_hidden_dim: int = 256
    decoder_channels: int = 64
    epochs: int = 20
    batch_size: int = 32
    lr: float = 4e-4
    warmup_steps: int = 500


@dataclass
class IdentityConfig:
    embedding_dim: int = 128
    base_channels: int = 32
    margin: float = 0.2
    scale: float = 16.0
    n_classes: Optional[int] = None
    epochs: int = 15
    batch_size: int = 64
    lr: float = 1e-3


@dataclass
class EstimatorConfig:
    base_channels: int = 32
    epochs: int = 15
    batch_size: int = 64
    lr: float = 1e-3


@dataclass
class DiffusionConfig:
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    latent_channels: int = 4
    base_channels: int = 64
    channel_multipliers: List[int] = field(default_factory=lambda: [1, 2, 4])
    num_res_blocks: int = 2
    attention_resolutions: List[int] = field(default_factory=lambda: [8, 4])
    num_heads: int = 4
    context_dim: int = 192
    transformer_depth: int = 1
    use_identity: bool = True
    acr_weight: float = 0.1
    freeze_encoder: bool = False
    max_steps: int = 20000
    batch_size: int = 16
    lr: float = 1e-4
    ddim_steps: int = 50
    log_every: int = 50
    checkpoint_every: int = 2000


@dataclass
class EvalConfig:
    n_samples: int = 200
    swap_threshold: float = 0.05
    swap_mass_ratio: float = 0.6
    attention_timesteps: int = 4


@dataclass
class RunConfig:
    preset: str = "desk"
    seed: int = 0
    image_size: int = 64
    device: str = "auto"
    deterministic: bool = True
    paths: PathsConfig = field(default_factory=PathsConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    ae: AEConfig = field(default_factory=AEConfig)
    rsc: RscConfig = field(default_factory=RscConfig)
    identity: IdentityConfig = field(default_factory=IdentityConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    @property
    def latent_size(self) -> int:
        return self.image_size // 2 ** (len(self.ae.channel_multipliers) - 1)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


SECTION_TYPES = {
    "paths": PathsConfig,
    "synth": SynthConfig,
    "ae": AEConfig,
    "rsc": RscConfig,
    "identity": IdentityConfig,
    "estimator": EstimatorConfig,
    "diffusion": DiffusionConfig,
    "evaluation": EvalConfig,
}


def load_config(config_path: str) -> Dict[str, Any]:
    """
    Read one YAML layer (a preset or a user file) as a nested dictionary.

    Args:
        config_path: YAML file holding a mapping

    Returns:
        The mapping, empty for an empty file
    """
    layer_file = Path(config_path)
    if not layer_file.exists():
        raise FileNotFoundError(f"Configuration file not found: {config_path}")

    try:
        layer = yaml.safe_load(layer_file.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"Invalid YAML configuration file: {e}")
    if not isinstance(layer, dict):
        raise ConfigError(f"Configuration file must hold a mapping: {config_path}")

    logger.debug(f"Read configuration layer {config_path} ({len(layer)} top-level keys)")
    return layer


def save_config(config: Dict[str, Any], config_path: str):
    """Write a resolved configuration next to the artifacts it produced."""
    target = Path(config_path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(yaml.safe_dump(config, default_flow_style=False, indent=2, sort_keys=False),
                          encoding="utf-8")
    except OSError as e:
        raise RuntimeError(f"Error saving configuration: {e}")
    logger.info(f"Resolved configuration written to {config_path}")


def merge_configs(base_config: Dict[str, Any], override_config: Dict[str, Any]) -> Dict[str, Any]:
    """
    Deep-merge one configuration layer over another.

    Nested sections merge key by key; any other value in ``override_config``
    replaces the base value outright. Neither input is modified.
    """
    merged = copy.deepcopy(base_config)

    def overlay(target: Dict[str, Any], layer: Dict[str, Any]):
        for key, value in layer.items():
            if isinstance(target.get(key), dict) and isinstance(value, dict):
                overlay(target[key], value)
            else:
                target[key] = copy.deepcopy(value)

    overlay(merged, override_config)
    return merged


def _dict_to_run_config(raw: Dict[str, Any]) -> RunConfig:
    top_level = {f.name for f in fields(RunConfig)} - set(SECTION_TYPES)
    unknown = set(raw) - top_level - set(SECTION_TYPES)
    if unknown:
        raise ConfigError(f"Unknown configuration keys: {sorted(unknown)}")

    kwargs: Dict[str, Any] = {key: raw[key] for key in top_level if key in raw}
    for name, section_type in SECTION_TYPES.items():
        section = raw.get(name) or {}
        known = {f.name for f in fields(section_type)}
        bad = set(section) - known
        if bad:
            raise ConfigError(f"Unknown keys in section '{name}': {sorted(bad)}")
        kwargs[name] = section_type(**section)
    return RunConfig(**kwargs)


def build_run_config(
    config_path: Optional[str] = None,
    preset: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """
    Build a validated RunConfig.

    Args:
        config_path: Optional user YAML file merged over the preset
        preset: Preset name (``desk`` or ``paper``); defaults to the user file's
            ``preset`` key, then ``desk``
        overrides: Nested dictionary applied last (before environment paths)

    Returns:
        Validated RunConfig
    """
    user = load_config(config_path) if config_path else {}
    preset = preset or user.get("preset") or "desk"
    if preset not in PRESETS:
        raise ConfigError(f"Unknown preset '{preset}', expected one of {PRESETS}")

    raw = asdict(RunConfig())
    preset_file = CONFIG_DIR / f"{preset}.yaml"
    if preset_file.exists():
        raw = merge_configs(raw, load_config(str(preset_file)))
    elif preset != "desk":
        raise ConfigError(f"Preset file not found: {preset_file}")

    raw = merge_configs(raw, user)
    raw = merge_configs(raw, overrides or {})
    raw["preset"] = preset

    for env_name, key in ENV_PATH_OVERRIDES.items():
        value = os.environ.get(env_name)
        if value:
            logger.info(f"Path override from {env_name}: {value}")
            raw["paths"][key] = value

    run_config = _dict_to_run_config(raw)
    validate_config(run_config)
    return run_config


def _mismatch(field_a: str, value_a: Any, field_b: str, value_b: Any, relation: str) -> ConfigError:
    return ConfigError(f"{field_a}={value_a} is inconsistent with {field_b}={value_b}: {relation}")


def validate_config(config: RunConfig) -> bool:
    """
    Validate cross-field consistency of a run configuration.

    Args:
        config: Run configuration

    Returns:
        True if configuration is valid (raises ConfigError otherwise)
    """
    if config.preset not in PRESETS:
        raise ConfigError(f"Unknown preset '{config.preset}'")
    if config.image_size <= 0:
        raise ConfigError(f"image_size must be positive, got {config.image_size}")

    ae_factor = 2 ** (len(config.ae.channel_multipliers) - 1)
    if ae_factor != 8:
        raise ConfigError(
            f"ae.channel_multipliers={config.ae.channel_multipliers} must downsample by 8, got {ae_factor}"
        )
    if config.image_size % ae_factor:
        raise _mismatch("image_size", config.image_size, "ae.channel_multipliers",
                        config.ae.channel_multipliers, f"image size must be divisible by {ae_factor}")
    if config.ae.mode not in ("vq", "ae"):
        raise ConfigError(f"ae.mode must be 'vq' or 'ae', got {config.ae.mode!r}")
    if config.ae.diffusion_latent not in ("continuous", "quantized"):
        raise ConfigError(f"ae.diffusion_latent must be 'continuous' or 'quantized', got {config.ae.diffusion_latent!r}")
    if config.ae.codebook_size < 16:
        raise ConfigError(f"ae.codebook_size must be >= 16, got {config.ae.codebook_size}")

    rsc = config.rsc
    rsc_factor = 2 ** (len(rsc.channel_multipliers) - 1)
    if config.image_size != rsc.output_resolution * rsc_factor:
        raise _mismatch("rsc.output_resolution", rsc.output_resolution, "image_size", config.image_size,
                        f"rsc.channel_multipliers downsample by {rsc_factor}")
    if rsc.out_channels != rsc.slot_dim:
        raise _mismatch("rsc.out_channels", rsc.out_channels, "rsc.slot_dim", rsc.slot_dim, "must be equal")
    if rsc.num_slots < 1 or rsc.num_iterations < 1:
        raise ConfigError("rsc.num_slots and rsc.num_iterations must be >= 1")

    diffusion = config.diffusion
    if diffusion.context_dim != rsc.slot_dim:
        raise _mismatch("diffusion.context_dim", diffusion.context_dim, "rsc.slot_dim", rsc.slot_dim,
                        "semantic token size must equal the cross-attention context size")
    if diffusion.latent_channels != config.ae.code_dim:
        raise _mismatch("diffusion.latent_channels", diffusion.latent_channels, "ae.code_dim",
                        config.ae.code_dim, "must be equal")
    latent_resolutions = {
        config.latent_size // 2 ** level for level in range(len(diffusion.channel_multipliers))
    }
    stray = set(diffusion.attention_resolutions) - latent_resolutions
    if stray:
        raise _mismatch("diffusion.attention_resolutions", diffusion.attention_resolutions,
                        "image_size", config.image_size,
                        f"available denoiser resolutions are {sorted(latent_resolutions)}")
    if config.latent_size % 2 ** (len(diffusion.channel_multipliers) - 1):
        raise _mismatch("diffusion.channel_multipliers", diffusion.channel_multipliers,
                        "image_size", config.image_size, "latent size must survive every downsample")
    if not 0 < diffusion.beta_start < diffusion.beta_end < 1:
        raise ConfigError("diffusion betas must satisfy 0 < beta_start < beta_end < 1")
    if diffusion.acr_weight < 0:
        raise ConfigError(f"diffusion.acr_weight must be >= 0, got {diffusion.acr_weight}")
    if not 1 <= diffusion.ddim_steps <= diffusion.timesteps:
        raise _mismatch("diffusion.ddim_steps", diffusion.ddim_steps, "diffusion.timesteps",
                        diffusion.timesteps, "sampler steps must lie in [1, T]")

    return True


def config_digest(config: RunConfig, stage: str) -> str:
    """SHA-256 over the architecture-relevant sections of one stage."""
    if stage not in STAGE_SECTIONS:
        raise ValueError(f"Unknown stage for digest: {stage}")

    payload: Dict[str, Any] = {"image_size": config.image_size}
    full = config.to_dict()
    for section in STAGE_SECTIONS[stage]:
        payload[section] = {
            key: value for key, value in full[section].items() if key not in TRAINING_ONLY_KEYS
        }
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]
