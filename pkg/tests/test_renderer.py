import numpy as np
import pytest

from diff_fae.geometry.coefficients import PhysicalCoefficients, WeakPerspectiveCamera
from diff_fae.geometry.flame_lite import Mesh
from diff_fae.geometry.renderer import SH_CONSTANTS, rasterize, render_condition, sh_shade

SIZE = 16
IDENTITY_CAMERA = WeakPerspectiveCamera(scale=1.0, translation=np.zeros(2))


def to_normalized(pixel: float) -> float:
    """Inverse of the pixel mapping for a 16-pixel side."""
    return (pixel + 0.5) / SIZE * 2.0 - 1.0


def triangle(corners, z: float = 0.0) -> np.ndarray:
    return np.array([[to_normalized(c), to_normalized(r), z] for c, r in corners])


def flat_mesh(vertices: np.ndarray, faces) -> Mesh:
    normals = np.tile([0.0, 0.0, 1.0], (len(vertices), 1))
    return Mesh(vertices=vertices, faces=np.asarray(faces, dtype=np.int64), normals=normals)


def dc_lighting(value: float) -> np.ndarray:
    lighting = np.zeros((9, 3))
    lighting[0] = value / SH_CONSTANTS[0]
    return lighting


@pytest.fixture
def right_triangle() -> Mesh:
    # pixel corners (2, 2), (10, 2), (2, 10) wound counter-clockwise in image space
    return flat_mesh(triangle([(2, 2), (10, 2), (2, 10)]), [[0, 1, 2]])


def expected_coverage() -> np.ndarray:
    rows, cols = np.mgrid[0:SIZE, 0:SIZE]
    return (cols >= 2) & (rows >= 2) & (rows + cols <= 12)


def test_triangle_coverage_matches_edge_functions(right_triangle):
    rendered = rasterize(right_triangle, np.ones((3, 3)), dc_lighting(0.5), IDENTITY_CAMERA, SIZE, SIZE)
    np.testing.assert_array_equal(rendered.coverage_mask, expected_coverage())


def test_dc_lighting_shades_uniformly(right_triangle):
    rendered = rasterize(right_triangle, np.ones((3, 3)), dc_lighting(0.5), IDENTITY_CAMERA, SIZE, SIZE)
    covered = rendered.coverage_mask
    np.testing.assert_allclose(rendered.image[covered], 0.5, atol=1e-6)
    assert np.all(rendered.image[~covered] == 0)
    assert np.all(rendered.depth[~covered] == 0)


def test_coverage_ignores_albedo_and_lighting(right_triangle):
    bright = rasterize(right_triangle, np.ones((3, 3)), dc_lighting(0.9), IDENTITY_CAMERA, SIZE, SIZE)
    dim = rasterize(right_triangle, np.full((3, 3), 0.2), dc_lighting(0.1), IDENTITY_CAMERA, SIZE, SIZE)
    np.testing.assert_array_equal(bright.coverage_mask, dim.coverage_mask)


def test_clockwise_faces_are_culled():
    mesh = flat_mesh(triangle([(2, 2), (2, 10), (10, 2)]), [[0, 1, 2]])
    rendered = rasterize(mesh, np.ones((3, 3)), dc_lighting(0.5), IDENTITY_CAMERA, SIZE, SIZE)
    assert not rendered.coverage_mask.any()


def test_nearest_surface_wins():
    corners = [(2, 2), (10, 2), (2, 10)]
    # depth is -Z, so the face at z = 0.5 lies in front
    vertices = np.vstack([triangle(corners, z=-0.5), triangle(corners, z=0.5)])
    albedo = np.vstack([np.tile([0.0, 1.0, 0.0], (3, 1)), np.tile([1.0, 0.0, 0.0], (3, 1))])
    for faces in ([[0, 1, 2], [3, 4, 5]], [[3, 4, 5], [0, 1, 2]]):
        rendered = rasterize(flat_mesh(vertices, faces), albedo, dc_lighting(1.0), IDENTITY_CAMERA, SIZE, SIZE)
        colors = rendered.image[rendered.coverage_mask]
        np.testing.assert_allclose(colors, np.tile([1.0, 0.0, 0.0], (len(colors), 1)), atol=1e-6)


def test_sh_shade_dc_term():
    lighting = np.zeros((9, 3))
    lighting[0] = [1.0, 2.0, 3.0]
    np.testing.assert_allclose(sh_shade(np.array([0.0, 0.0, 1.0]), lighting), SH_CONSTANTS[0] * lighting[0])


def test_sh_shade_clamps_negative_irradiance():
    lighting = np.zeros((9, 3))
    lighting[2] = -1.0  # the z-linear term
    np.testing.assert_array_equal(sh_shade(np.array([0.0, 0.0, 1.0]), lighting), 0.0)


def test_sh_shade_requires_unit_normals():
    with pytest.raises(ValueError, match="unit normals"):
        sh_shade(np.array([0.0, 0.0, 2.0]), dc_lighting(0.5))


def test_lighting_shape_is_checked(right_triangle):
    with pytest.raises(ValueError, match=r"\(9, 3\)"):
        rasterize(right_triangle, np.ones((3, 3)), np.zeros((4, 3)), IDENTITY_CAMERA, SIZE, SIZE)


def test_neutral_face_render(template):
    coeffs = PhysicalCoefficients.zeros(template.d_shape, template.d_expr, template.d_albedo)
    rendered = render_condition(template, coeffs, 32, 32)
    assert rendered.image.shape == (32, 32, 3)
    assert rendered.image.dtype == np.float32
    assert 0.05 < rendered.coverage_mask.mean() < 0.95
    assert rendered.image.min() >= 0.0 and rendered.image.max() <= 1.0
    assert rendered.image[rendered.coverage_mask].max() > 0


def test_camera_scale_must_be_positive():
    with pytest.raises(ValueError, match="scale"):
        WeakPerspectiveCamera(scale=0.0)


def test_sh_shade_matches_direct_basis_evaluation():
    rng = np.random.default_rng(0)
    normal = rng.normal(size=3)
    normal /= np.linalg.norm(normal)
    lighting = rng.uniform(-0.2, 0.2, size=(9, 3))
    lighting[0] = 3.0
    x, y, z = normal
    basis = np.array([
        0.282095,
        0.488603 * y, 0.488603 * z, 0.488603 * x,
        1.092548 * x * y, 1.092548 * y * z, 0.315392 * (3 * z * z - 1), 1.092548 * x * z,
        0.546274 * (x * x - y * y),
    ])
    np.testing.assert_allclose(sh_shade(normal, lighting), basis @ lighting, rtol=1e-12)
