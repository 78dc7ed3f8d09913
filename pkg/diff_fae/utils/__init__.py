"""
Utility modules for DiffFAE.
"""

from .config_loader import (
    RunConfig,
    build_run_config,
    config_digest,
    load_config,
    merge_configs,
    save_config,
    validate_config,
)
from .checkpoint import (
    STAGE_COMMANDS,
    checkpoint_suffix,
    load_checkpoint,
    load_container,
    save_checkpoint,
    save_container,
    stage_checkpoint,
)
from .errors import CheckpointMismatchError, ConfigError, MissingPrerequisiteError

__all__ = [
    "RunConfig",
    "build_run_config",
    "config_digest",
    "load_config",
    "save_config",
    "merge_configs",
    "validate_config",
    "STAGE_COMMANDS",
    "checkpoint_suffix",
    "stage_checkpoint",
    "load_checkpoint",
    "load_container",
    "save_checkpoint",
    "save_container",
    "CheckpointMismatchError",
    "ConfigError",
    "MissingPrerequisiteError",
]
