"""
Exception types the command line maps to exit codes.
"""

from typing import Optional


class ConfigError(ValueError):
    """Invalid or internally inconsistent run configuration."""


class MissingPrerequisiteError(FileNotFoundError):
    """An artifact produced by an earlier stage is missing."""

    def __init__(self, artifact: str, stage: Optional[str] = None):
        self.artifact = artifact
        self.stage = stage
        message = f"Missing prerequisite: {artifact}"
        if stage:
            message += f" (run `{stage}` first)"
        super().__init__(message)


class CheckpointMismatchError(RuntimeError):
    """A checkpoint was written under a different configuration."""

    def __init__(self, path: str, expected_digest: str, found_digest: str):
        self.path = path
        self.expected_digest = expected_digest
        self.found_digest = found_digest
        super().__init__(
            f"Checkpoint {path} was trained with config digest {found_digest}, "
            f"current config digest is {expected_digest}"
        )
