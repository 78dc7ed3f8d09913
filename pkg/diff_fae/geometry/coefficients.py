"""
Physical coefficient records (β, ρ, ψ, α, l, c) describing one rendered face.
"""

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from ..utils.checkpoint import load_container, save_container

EDITABLE_FIELDS = ("pose", "expression", "lighting")
ATTRIBUTE_BLOCKS = ("shape", "pose", "expression", "lighting", "camera")


@dataclass(frozen=True)
class WeakPerspectiveCamera:
    scale: float = 0.55
    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"Camera scale must be > 0, got {self.scale}")
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(2))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([[self.scale], self.translation])

    @classmethod
    def from_vector(cls, vector: np.ndarray) -> "WeakPerspectiveCamera":
        return cls(scale=float(vector[0]), translation=np.asarray(vector[1:3]))


@dataclass(frozen=True)
class AlbedoParams:
    coefficients: np.ndarray
    base_tone: np.ndarray = field(default_factory=lambda: np.array([0.85, 0.65, 0.55]))

    def __post_init__(self):
        object.__setattr__(self, "coefficients", np.asarray(self.coefficients, dtype=np.float64))
        tone = np.asarray(self.base_tone, dtype=np.float64).reshape(3)
        if np.any(tone < 0) or np.any(tone > 1):
            raise ValueError(f"Base skin tone must lie in [0, 1], got {tone}")
        object.__setattr__(self, "base_tone", tone)

    def expand(self, albedo_mean: np.ndarray, albedo_basis: np.ndarray) -> np.ndarray:
        """Per-vertex RGB albedo, clamped to [0, 1]."""
        if self.coefficients.shape != (albedo_basis.shape[-1],):
            raise ValueError(
                f"Albedo coefficients have shape {self.coefficients.shape}, "
                f"template expects ({albedo_basis.shape[-1]},)"
            )
        albedo = albedo_mean * self.base_tone + np.einsum("ncd,d->nc", albedo_basis, self.coefficients)
        return np.clip(albedo, 0.0, 1.0)


@dataclass(frozen=True)
class PhysicalCoefficients:
    """Full rendering parameterization of one face instance."""

    shape: np.ndarray
    pose: np.ndarray
    expression: np.ndarray
    albedo: AlbedoParams
    lighting: np.ndarray  # (9, 3)
    camera: WeakPerspectiveCamera = field(default_factory=WeakPerspectiveCamera)

    def __post_init__(self):
        for name in ("shape", "pose", "expression"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        lighting = np.asarray(self.lighting, dtype=np.float64)
        if lighting.shape != (9, 3):
            raise ValueError(f"SH lighting must have shape (9, 3), got {lighting.shape}")
        if not np.all(np.isfinite(lighting)):
            raise ValueError("SH lighting contains non-finite values")
        object.__setattr__(self, "lighting", lighting)

    @classmethod
    def zeros(cls, d_shape: int, d_expr: int, d_albedo: int, n_joints: int = 4,
              ambient: float = 3.0) -> "PhysicalCoefficients":
        """Neutral face: zero shape/pose/expression, DC-only white light."""
        lighting = np.zeros((9, 3))
        lighting[0] = ambient
        return cls(
            shape=np.zeros(d_shape),
            pose=np.zeros(3 * n_joints + 3),
            expression=np.zeros(d_expr),
            albedo=AlbedoParams(coefficients=np.zeros(d_albedo)),
            lighting=lighting,
        )

    def to_arrays(self, prefix: str = "") -> Dict[str, np.ndarray]:
        return {
            f"{prefix}shape": self.shape,
            f"{prefix}pose": self.pose,
            f"{prefix}expression": self.expression,
            f"{prefix}albedo": self.albedo.coefficients,
            f"{prefix}base_tone": self.albedo.base_tone,
            f"{prefix}lighting": self.lighting,
            f"{prefix}camera": self.camera.to_vector(),
        }

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], prefix: str = "") -> "PhysicalCoefficients":
        get = lambda key: np.asarray(arrays[f"{prefix}{key}"], dtype=np.float64)  # noqa: E731
        return cls(
            shape=get("shape"),
            pose=get("pose"),
            expression=get("expression"),
            albedo=AlbedoParams(coefficients=get("albedo"), base_tone=get("base_tone")),
            lighting=get("lighting"),
            camera=WeakPerspectiveCamera.from_vector(get("camera")),
        )

    def attribute_vector(self) -> np.ndarray:
        """Regression target: shape, pose, expression, lighting and camera, concatenated."""
        return np.concatenate([
            self.shape, self.pose, self.expression, self.lighting.reshape(-1), self.camera.to_vector(),
        ])


def attribute_slices(d_shape: int, d_expr: int, n_joints: int = 4) -> Dict[str, slice]:
    """Slices of ``attribute_vector`` per attribute block."""
    sizes = [d_shape, 3 * n_joints + 3, d_expr, 27, 3]
    slices, start = {}, 0
    for name, size in zip(ATTRIBUTE_BLOCKS, sizes):
        slices[name] = slice(start, start + size)
        start += size
    return slices


def build_edit_coefficients(
    source: PhysicalCoefficients,
    query: PhysicalCoefficients,
    only: Optional[Sequence[str]] = None,
) -> PhysicalCoefficients:
    """
    Field-wise substitution of query attributes into a source record.

    Identity attributes (shape and albedo) always come from the source. Without
    ``only``, pose, expression, lighting and camera come from the query. With
    ``only``, just the named fields are taken from the query; ``pose`` carries
    the camera along since both place the head in the frame.

    Args:
        source: Coefficients of the source face
        query: Coefficients of the query face
        only: Subset of ``pose``, ``expression``, ``lighting``

    Returns:
        Coefficients for the conditioning render
    """
    if only is None:
        return replace(source, pose=query.pose, expression=query.expression,
                       lighting=query.lighting, camera=query.camera)

    unknown = set(only) - set(EDITABLE_FIELDS)
    if unknown:
        raise ValueError(f"Unknown editable fields {sorted(unknown)}, expected a subset of {EDITABLE_FIELDS}")
    updates = {}
    if "pose" in only:
        updates["pose"] = query.pose
        updates["camera"] = query.camera
    if "expression" in only:
        updates["expression"] = query.expression
    if "lighting" in only:
        updates["lighting"] = query.lighting
    return replace(source, **updates)


def changed_fields(a: PhysicalCoefficients, b: PhysicalCoefficients) -> List[str]:
    """Names of the fields that differ between two records."""
    changed = []
    for name, left, right in (
        ("shape", a.shape, b.shape),
        ("pose", a.pose, b.pose),
        ("expression", a.expression, b.expression),
        ("albedo", a.albedo.coefficients, b.albedo.coefficients),
        ("base_tone", a.albedo.base_tone, b.albedo.base_tone),
        ("lighting", a.lighting, b.lighting),
        ("camera", a.camera.to_vector(), b.camera.to_vector()),
    ):
        if left.shape != right.shape or not np.array_equal(left, right):
            changed.append(name)
    return changed


def save_coefficients(coeffs: PhysicalCoefficients, path: Union[str, Path]) -> Path:
    return save_container(path, coeffs.to_arrays(), kind="coefficients")


def load_coefficients(path: Union[str, Path]) -> PhysicalCoefficients:
    arrays, _ = load_container(path, kind="coefficients", as_numpy=True)
    return PhysicalCoefficients.from_arrays(arrays)
