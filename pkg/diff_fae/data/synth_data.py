"""
Procedural paired portraits with ground-truth coefficients and region masks.

A portrait is layered back to front: gradient background, clothes band,
rendered head, hair cap. The label map records the topmost layer per pixel.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from ..geometry.coefficients import AlbedoParams, PhysicalCoefficients, WeakPerspectiveCamera
from ..geometry.flame_lite import NUM_JOINTS, HeadTemplate
from ..geometry.renderer import RenderedTexture, render_condition

logger = logging.getLogger(__name__)

LABELS = ("face", "hair", "clothes", "background")
FACE, HAIR, CLOTHES, BACKGROUND = range(4)
MIN_FACE_FRACTION = 0.05
MIN_BACKGROUND_FRACTION = 0.10
MAX_PAIR_ATTEMPTS = 50


@dataclass(frozen=True)
class HairStyle:
    band_height: float
    color: np.ndarray


@dataclass(frozen=True)
class ClothesStyle:
    height: float
    color: np.ndarray
    stripe_period: int


@dataclass(frozen=True)
class BackgroundStyle:
    color_a: np.ndarray
    color_b: np.ndarray
    angle: float
    noise_amplitude: float


@dataclass(frozen=True)
class IdentitySpec:
    """Everything that stays fixed across the frames of one synthetic person."""

    identity_id: int
    shape: np.ndarray
    albedo: AlbedoParams
    hair: HairStyle
    clothes: ClothesStyle
    background: BackgroundStyle

    def coefficients(self, pose: np.ndarray, expression: np.ndarray, lighting: np.ndarray,
                     camera: WeakPerspectiveCamera) -> PhysicalCoefficients:
        return PhysicalCoefficients(
            shape=self.shape, pose=pose, expression=expression,
            albedo=self.albedo, lighting=lighting, camera=camera,
        )


@dataclass
class SamplePair:
    pair_id: str
    identity_id: int
    source_image: np.ndarray
    query_image: np.ndarray
    source_coeffs: PhysicalCoefficients
    query_coeffs: PhysicalCoefficients
    source_mask: np.ndarray
    query_mask: np.ndarray
    source_render: np.ndarray
    query_render: np.ndarray


def _color(rng: np.random.Generator, low: float = 0.05, high: float = 0.95) -> np.ndarray:
    return rng.uniform(low, high, size=3)


def sample_identity(seed: int, d_shape: int = 10, d_albedo: int = 8) -> IdentitySpec:
    """
    Draw a synthetic identity.

    Args:
        seed: Identity seed, also used as ``identity_id``
        d_shape: Shape coefficient count
        d_albedo: Albedo coefficient count

    Returns:
        IdentitySpec with β drawn in [-2, 2]
    """
    rng = np.random.default_rng(seed)
    tone = np.array([0.92, 0.72, 0.60]) * rng.uniform(0.55, 1.05) + rng.uniform(-0.05, 0.05, size=3)
    return IdentitySpec(
        identity_id=int(seed),
        shape=rng.uniform(-2.0, 2.0, size=d_shape),
        albedo=AlbedoParams(coefficients=rng.uniform(-1.0, 1.0, size=d_albedo), base_tone=np.clip(tone, 0.05, 1.0)),
        hair=HairStyle(band_height=float(rng.uniform(0.1, 0.3)), color=_color(rng, 0.02, 0.6)),
        clothes=ClothesStyle(
            height=float(rng.uniform(0.15, 0.35)),
            color=_color(rng),
            stripe_period=int(rng.integers(3, 9)),
        ),
        background=BackgroundStyle(
            color_a=_color(rng),
            color_b=_color(rng),
            angle=float(rng.uniform(0.0, 2.0 * np.pi)),
            noise_amplitude=float(rng.uniform(0.0, 0.05)),
        ),
    )


def sample_scene(
    rng: np.random.Generator,
    d_expr: int,
    max_yaw_deg: float = 60.0,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, WeakPerspectiveCamera]:
    """Draw pose, expression, SH lighting and camera for one frame (eyeballs held at zero)."""
    max_yaw = np.deg2rad(max_yaw_deg)
    yaw = rng.normal(0.0, max_yaw / 2.0)
    while abs(yaw) > max_yaw:
        yaw = rng.normal(0.0, max_yaw / 2.0)

    pose = np.zeros(3 * NUM_JOINTS + 3)
    pose[0:3] = [rng.uniform(-0.15, 0.15), yaw, rng.uniform(-0.08, 0.08)]
    pose[3:6] = rng.uniform(-0.1, 0.1, size=3)
    pose[6] = rng.uniform(0.0, 0.35)

    expression = rng.uniform(-2.0, 2.0, size=d_expr)

    lighting = np.zeros((9, 3))
    lighting[0] = rng.uniform(2.6, 3.4) * rng.uniform(0.9, 1.1, size=3)
    lighting[1:4] = rng.uniform(-0.7, 0.7, size=(3, 1)) * rng.uniform(0.9, 1.1, size=(3, 3))
    lighting[4:9] = rng.uniform(-0.25, 0.25, size=(5, 1))

    camera = WeakPerspectiveCamera(
        scale=float(rng.uniform(0.5, 0.6)),
        translation=np.array([rng.uniform(-0.08, 0.08), rng.uniform(0.0, 0.1)]),
    )
    return pose, expression, lighting, camera


def _background_layer(style: BackgroundStyle, identity_id: int, height: int, width: int) -> np.ndarray:
    rows, cols = np.meshgrid(np.linspace(-1, 1, height), np.linspace(-1, 1, width), indexing="ij")
    t = (np.cos(style.angle) * cols + np.sin(style.angle) * rows) / np.sqrt(2.0)
    t = (t + 1.0) / 2.0
    image = (1.0 - t)[..., None] * style.color_a + t[..., None] * style.color_b
    noise = np.random.default_rng([identity_id, height, width]).normal(0.0, 1.0, size=(height, width, 1))
    return np.clip(image + style.noise_amplitude * noise, 0.0, 1.0)


def _hair_layer(coverage: np.ndarray, style: HairStyle, height: int) -> np.ndarray:
    """Cap band straddling the top silhouette of the rendered head, half outside and half inside."""
    band = max(int(round(style.band_height * height)), 2)
    hair = np.zeros_like(coverage)
    covered_cols = np.flatnonzero(coverage.any(axis=0))
    if covered_cols.size == 0:
        return hair
    head_top = np.argmax(coverage[:, covered_cols], axis=0)
    rows = np.arange(height)[:, None]
    lo = head_top - band // 2
    hi = head_top + band - band // 2
    hair[:, covered_cols] = (rows >= lo) & (rows < hi)
    return hair


def compose_portrait(
    template: HeadTemplate,
    identity: IdentitySpec,
    pose: np.ndarray,
    expression: np.ndarray,
    lighting: np.ndarray,
    camera: WeakPerspectiveCamera,
    height: int,
    width: int,
) -> Tuple[np.ndarray, np.ndarray, RenderedTexture]:
    """
    Paint one portrait.

    Args:
        template: Head model
        identity: Identity providing shape, albedo and layer styles
        pose: Pose vector
        expression: Expression coefficients
        lighting: (9, 3) SH lighting
        camera: Weak-perspective camera
        height: Image height
        width: Image width

    Returns:
        Tuple of (image H×W×3 float32, label map H×W uint8, head render)
    """
    coeffs = identity.coefficients(pose, expression, lighting, camera)
    render = render_condition(template, coeffs, height, width)
    if not render.coverage_mask.any():
        raise ValueError("degenerate pose: the head does not cover any pixel")

    image = _background_layer(identity.background, identity.identity_id, height, width)
    labels = np.full((height, width), BACKGROUND, dtype=np.uint8)

    clothes_top = int(round(height * (1.0 - identity.clothes.height)))
    stripes = ((np.arange(height) // identity.clothes.stripe_period) % 2)[clothes_top:]
    image[clothes_top:] = identity.clothes.color * (0.8 + 0.2 * stripes)[:, None, None]
    labels[clothes_top:] = CLOTHES

    face = render.coverage_mask
    image[face] = render.image[face]
    labels[face] = FACE

    hair = _hair_layer(face, identity.hair, height)
    streaks = 0.85 + 0.15 * np.cos(np.arange(width) * 1.7)[None, :, None]
    image = np.where(hair[..., None], identity.hair.color * streaks, image)
    labels[hair] = HAIR

    return image.astype(np.float32), labels, render


def label_fractions(labels: np.ndarray) -> Dict[str, float]:
    counts = np.bincount(labels.reshape(-1), minlength=len(LABELS))
    return {name: float(counts[i]) / labels.size for i, name in enumerate(LABELS)}


def _frame_is_valid(labels: np.ndarray) -> bool:
    fractions = label_fractions(labels)
    return fractions["face"] >= MIN_FACE_FRACTION and fractions["background"] >= MIN_BACKGROUND_FRACTION


def make_pair(
    template: HeadTemplate,
    identity: IdentitySpec,
    seed: int,
    height: int = 64,
    width: int = 64,
    max_yaw_deg: float = 60.0,
) -> SamplePair:
    """
    Two frames of one identity with independently drawn pose, expression,
    lighting and camera. Frames below the label-frequency floors are redrawn.
    """
    rng = np.random.default_rng([identity.identity_id, seed])
    frames = []
    for role in ("source", "query"):
        for attempt in range(MAX_PAIR_ATTEMPTS):
            pose, expression, lighting, camera = sample_scene(rng, template.d_expr, max_yaw_deg)
            try:
                image, labels, render = compose_portrait(
                    template, identity, pose, expression, lighting, camera, height, width
                )
            except ValueError:
                continue
            if _frame_is_valid(labels):
                break
            logger.warning(
                f"Resampling {role} frame of identity {identity.identity_id} (seed {seed}): "
                f"label fractions {label_fractions(labels)} below floors"
            )
        else:
            raise RuntimeError(
                f"Could not draw a valid {role} frame for identity {identity.identity_id} "
                f"after {MAX_PAIR_ATTEMPTS} attempts"
            )
        frames.append((identity.coefficients(pose, expression, lighting, camera), image, labels, render))

    (coeffs_s, image_s, mask_s, render_s), (coeffs_q, image_q, mask_q, render_q) = frames
    return SamplePair(
        pair_id=f"{identity.identity_id:06d}_{seed:04d}",
        identity_id=identity.identity_id,
        source_image=image_s,
        query_image=image_q,
        source_coeffs=coeffs_s,
        query_coeffs=coeffs_q,
        source_mask=mask_s,
        query_mask=mask_q,
        source_render=render_s.image,
        query_render=render_q.image,
    )
