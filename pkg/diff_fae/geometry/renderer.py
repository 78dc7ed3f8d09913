"""
Software rasterizer producing the texture rendering used as physical condition.

Order-2 real spherical harmonics shade a per-vertex albedo under a
weak-perspective camera. Pixel (i, j) samples the normalized coordinate
((j + 0.5) / W * 2 - 1, (i + 0.5) / H * 2 - 1); +y points down the image.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .coefficients import PhysicalCoefficients, WeakPerspectiveCamera
from .flame_lite import HeadTemplate, Mesh, forward_flame

logger = logging.getLogger(__name__)

SH_CONSTANTS = np.array([
    0.282095,
    0.488603, 0.488603, 0.488603,
    1.092548, 1.092548, 0.315392, 1.092548, 0.546274,
])
UNIT_TOLERANCE = 1e-4


@dataclass
class RenderedTexture:
    image: np.ndarray          # (H, W, 3) float32 in [0, 1]
    coverage_mask: np.ndarray  # (H, W) bool
    depth: np.ndarray          # (H, W) float32, 0 where uncovered


def sh_basis(normals: np.ndarray) -> np.ndarray:
    """Evaluate the nine SH basis functions at unit normals (..., 3) -> (..., 9)."""
    x, y, z = normals[..., 0], normals[..., 1], normals[..., 2]
    terms = np.stack([
        np.ones_like(x),
        y, z, x,
        x * y, y * z, 3.0 * z ** 2 - 1.0, x * z, x ** 2 - y ** 2,
    ], axis=-1)
    return terms * SH_CONSTANTS


def _check_lighting(lighting: np.ndarray) -> np.ndarray:
    lighting = np.asarray(lighting, dtype=np.float64)
    if lighting.shape != (9, 3):
        raise ValueError(f"SH lighting must have shape (9, 3), got {lighting.shape}")
    return lighting


def sh_shade(normal: np.ndarray, lighting: np.ndarray) -> np.ndarray:
    """
    RGB irradiance for one or more unit normals.

    Args:
        normal: (3,) or (..., 3) unit vectors
        lighting: (9, 3) SH coefficients per RGB channel

    Returns:
        (..., 3) irradiance clamped at 0 from below
    """
    normal = np.asarray(normal, dtype=np.float64)
    lengths = np.linalg.norm(normal, axis=-1)
    if np.any(np.abs(lengths - 1.0) > UNIT_TOLERANCE):
        raise ValueError(f"sh_shade expects unit normals, got norm {lengths.min():.6f}..{lengths.max():.6f}")
    return np.maximum(sh_basis(normal) @ _check_lighting(lighting), 0.0)


def project(vertices: np.ndarray, camera: WeakPerspectiveCamera) -> Tuple[np.ndarray, np.ndarray]:
    """Weak-perspective projection: xy = s·(X, Y) + t, depth = -Z."""
    vertices = np.asarray(vertices, dtype=np.float64)
    xy = camera.scale * vertices[:, :2] + camera.translation
    return xy, -vertices[:, 2]


def to_pixel_coordinates(xy: np.ndarray, height: int, width: int) -> np.ndarray:
    """Normalized [-1, 1] coordinates to continuous pixel indices (column, row)."""
    px = (xy[:, 0] + 1.0) / 2.0 * width - 0.5
    py = (xy[:, 1] + 1.0) / 2.0 * height - 0.5
    return np.stack([px, py], axis=1)


def _edge(a: np.ndarray, b: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    return (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])


def rasterize(
    mesh: Mesh,
    albedo: np.ndarray,
    lighting: np.ndarray,
    camera: WeakPerspectiveCamera,
    height: int,
    width: int,
) -> RenderedTexture:
    """
    Z-buffer rasterization with barycentric interpolation of albedo and normals.

    Faces whose projected winding is clockwise (facing away from the camera)
    are culled; zero-area faces are skipped. Coverage is inclusive of triangle
    edges, and the nearest surface wins each pixel.

    Args:
        mesh: Posed mesh with unit vertex normals
        albedo: (n, 3) per-vertex RGB albedo in [0, 1]
        lighting: (9, 3) SH coefficients
        camera: Weak-perspective camera
        height: Image height in pixels
        width: Image width in pixels

    Returns:
        RenderedTexture
    """
    if mesh.normals is None:
        raise ValueError("rasterize needs per-vertex normals")
    lighting = _check_lighting(lighting)
    albedo = np.asarray(albedo, dtype=np.float64)
    if albedo.shape != mesh.vertices.shape:
        raise ValueError(f"albedo must have shape {mesh.vertices.shape}, got {albedo.shape}")

    xy, depth = project(mesh.vertices, camera)
    pixels = to_pixel_coordinates(xy, height, width)

    zbuffer = np.full((height, width), np.inf)
    face_index = np.full((height, width), -1, dtype=np.int64)
    bary = np.zeros((height, width, 3))

    for f, (i0, i1, i2) in enumerate(mesh.faces):
        p0, p1, p2 = pixels[i0], pixels[i1], pixels[i2]
        area = _edge(p0, p1, p2[0], p2[1])
        if area <= 0:
            continue

        xs = (p0[0], p1[0], p2[0])
        ys = (p0[1], p1[1], p2[1])
        col_lo, col_hi = max(int(np.ceil(min(xs))), 0), min(int(np.floor(max(xs))), width - 1)
        row_lo, row_hi = max(int(np.ceil(min(ys))), 0), min(int(np.floor(max(ys))), height - 1)
        if col_lo > col_hi or row_lo > row_hi:
            continue

        cols, rows = np.meshgrid(np.arange(col_lo, col_hi + 1), np.arange(row_lo, row_hi + 1))
        w0 = _edge(p1, p2, cols, rows)
        w1 = _edge(p2, p0, cols, rows)
        w2 = _edge(p0, p1, cols, rows)
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue

        b = np.stack([w0, w1, w2], axis=-1)[inside] / area
        z = b @ depth[[i0, i1, i2]]
        r, c = rows[inside], cols[inside]
        nearer = z < zbuffer[r, c]
        r, c = r[nearer], c[nearer]
        zbuffer[r, c] = z[nearer]
        face_index[r, c] = f
        bary[r, c] = b[nearer]

    covered = face_index >= 0
    image = np.zeros((height, width, 3))
    depth_map = np.zeros((height, width))
    if covered.any():
        corners = mesh.faces[face_index[covered]]  # (p, 3)
        weights = bary[covered][..., None]         # (p, 3, 1)
        pixel_albedo = (albedo[corners] * weights).sum(axis=1)
        normals = (mesh.normals[corners] * weights).sum(axis=1)
        normals /= np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-12)
        irradiance = np.maximum(sh_basis(normals) @ lighting, 0.0)
        image[covered] = np.clip(pixel_albedo * irradiance, 0.0, 1.0)
        depth_map[covered] = zbuffer[covered]

    return RenderedTexture(
        image=image.astype(np.float32),
        coverage_mask=covered,
        depth=depth_map.astype(np.float32),
    )


def render_condition(
    template: HeadTemplate,
    coeffs: PhysicalCoefficients,
    height: int,
    width: int,
) -> RenderedTexture:
    """forward_flame -> albedo expansion -> rasterize."""
    mesh = forward_flame(template, coeffs.shape, coeffs.pose, coeffs.expression)
    albedo = coeffs.albedo.expand(template.albedo_mean, template.albedo_basis)
    return rasterize(mesh, albedo, coeffs.lighting, coeffs.camera, height, width)
