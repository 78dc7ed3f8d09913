"""
Miniature morphable head model.

The model follows the FLAME forward function: a template mesh receives
linear shape, expression and pose-corrective offsets, joints are regressed
from the shaped mesh, and linear blend skinning rotates the vertices along a
fixed kinematic chain (root -> neck -> jaw, root -> each eyeball).

Model space uses image orientation: +x right, +y down, +z toward the camera.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from ..utils.checkpoint import load_container, save_container

logger = logging.getLogger(__name__)

NUM_JOINTS = 4
JOINT_NAMES = ("root", "neck", "jaw", "eye_left", "eye_right")
PARENTS = np.array([-1, 0, 1, 0, 0], dtype=np.int64)
POSE_DIM = 3 * NUM_JOINTS + 3
MAX_DISPLACEMENT_FRACTION = 0.15
SMALL_ANGLE = 1e-8


@dataclass
class HeadTemplate:
    """Template mesh, blendshape bases, joint regressor and skinning weights."""

    vertices_rest: np.ndarray          # (n, 3)
    faces: np.ndarray                  # (m, 3) int64
    shape_basis: np.ndarray            # (n, 3, d_shape)
    expr_basis: np.ndarray             # (n, 3, d_expr)
    pose_corrective_basis: np.ndarray  # (n, 3, 9k)
    joint_regressor: np.ndarray        # (k+1, n)
    blendweights: np.ndarray           # (k+1, n)
    albedo_mean: np.ndarray            # (n, 3)
    albedo_basis: np.ndarray           # (n, 3, d_albedo)
    parents: np.ndarray = PARENTS
    seed: int = 0

    @property
    def n_vertices(self) -> int:
        return self.vertices_rest.shape[0]

    @property
    def d_shape(self) -> int:
        return self.shape_basis.shape[-1]

    @property
    def d_expr(self) -> int:
        return self.expr_basis.shape[-1]

    @property
    def d_albedo(self) -> int:
        return self.albedo_basis.shape[-1]

    @property
    def radius(self) -> float:
        centered = self.vertices_rest - self.vertices_rest.mean(axis=0)
        return float(np.linalg.norm(centered, axis=1).max())

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {
            "vertices_rest": self.vertices_rest,
            "faces": self.faces,
            "shape_basis": self.shape_basis,
            "expr_basis": self.expr_basis,
            "pose_corrective_basis": self.pose_corrective_basis,
            "joint_regressor": self.joint_regressor,
            "blendweights": self.blendweights,
            "albedo_mean": self.albedo_mean,
            "albedo_basis": self.albedo_basis,
            "parents": self.parents,
        }

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], seed: int = 0) -> "HeadTemplate":
        return cls(seed=seed, **{key: np.asarray(value) for key, value in arrays.items()})


@dataclass
class Mesh:
    vertices: np.ndarray  # (n, 3)
    faces: np.ndarray     # (m, 3)
    normals: np.ndarray   # (n, 3) unit


def save_template(template: HeadTemplate, path: Union[str, Path]) -> Path:
    return save_container(path, template.to_arrays(), kind="template", metadata={"seed": template.seed})


def load_template(path: Union[str, Path]) -> HeadTemplate:
    arrays, metadata = load_container(path, kind="template", as_numpy=True)
    return HeadTemplate.from_arrays(arrays, seed=int(metadata.get("seed", 0)))


# ---------------------------------------------------------------------------
# Template construction
# ---------------------------------------------------------------------------

def _icosahedron() -> Tuple[np.ndarray, np.ndarray]:
    t = (1.0 + np.sqrt(5.0)) / 2.0
    vertices = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    return vertices / np.linalg.norm(vertices, axis=1, keepdims=True), faces


def _subdivide(vertices: np.ndarray, faces: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    verts = [v for v in vertices]
    midpoint_cache: Dict[Tuple[int, int], int] = {}

    def midpoint(a: int, b: int) -> int:
        key = (a, b) if a < b else (b, a)
        if key not in midpoint_cache:
            mid = (verts[a] + verts[b]) / 2.0
            verts.append(mid / np.linalg.norm(mid))
            midpoint_cache[key] = len(verts) - 1
        return midpoint_cache[key]

    new_faces = []
    for a, b, c in faces:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        new_faces.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]])
    return np.array(verts), np.array(new_faces, dtype=np.int64)


def icosphere_levels(n_vertices: int) -> int:
    """Number of subdivisions giving ``n_vertices`` (10·4^L + 2), or raise."""
    level, count = 0, 12
    while count < n_vertices:
        level += 1
        count = 10 * 4 ** level + 2
    if count != n_vertices:
        raise ValueError(
            f"n_vertices={n_vertices} is not realizable by icosphere subdivision "
            f"(valid sizes: 42, 162, 642, 2562, ...)"
        )
    return level


def _orient_outward(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    v0, v1, v2 = (vertices[faces[:, i]] for i in range(3))
    normals = np.cross(v1 - v0, v2 - v0)
    centroids = (v0 + v1 + v2) / 3.0
    inward = np.einsum("ij,ij->i", normals, centroids) < 0
    faces = faces.copy()
    faces[inward] = faces[inward][:, [0, 2, 1]]
    return faces


def _ramp(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _monomials(points: np.ndarray, degree: int = 3) -> np.ndarray:
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    columns = []
    for total in range(degree + 1):
        for i in range(total + 1):
            for j in range(total - i + 1):
                columns.append(x ** i * y ** j * z ** (total - i - j))
    return np.stack(columns, axis=1)


def _orthogonal_basis(features: np.ndarray, dim: int, rng: np.random.Generator, radius: float) -> np.ndarray:
    n, n_features = features.shape
    if dim > 3 * n_features:
        raise ValueError(f"Basis dimension {dim} exceeds the {3 * n_features} smooth fields available")
    mixing = rng.standard_normal((n_features, 3, dim))
    basis = np.einsum("nf,fcd->ncd", features, mixing).reshape(3 * n, dim)
    q, _ = np.linalg.qr(basis)
    basis = q.reshape(n, 3, dim)
    peak = np.linalg.norm(basis, axis=1).max(axis=0)
    scale = 0.95 * MAX_DISPLACEMENT_FRACTION * radius / (3.0 * peak)
    return basis * scale


def _group_regressor(mask: np.ndarray, points: np.ndarray, target: np.ndarray) -> np.ndarray:
    row = mask.astype(np.float64)
    if row.sum() == 0:
        row = np.zeros(len(points))
        row[np.argmin(np.linalg.norm(points - target, axis=1))] = 1.0
    return row / row.sum()


def make_toy_template(
    seed: int = 7,
    n_vertices: int = 642,
    d_shape: int = 10,
    d_expr: int = 10,
    d_albedo: int = 8,
) -> HeadTemplate:
    """
    Build a procedural head template.

    The mesh is an icosphere stretched into a head with a protruding jaw,
    a nose bump and two eye patches. Topology depends only on ``n_vertices``;
    the seed drives the bases.

    Args:
        seed: Seed for the random bases
        n_vertices: Vertex count, one of 42, 162, 642, 2562, ...
        d_shape: Shape basis size
        d_expr: Expression basis size
        d_albedo: Albedo basis size

    Returns:
        HeadTemplate
    """
    if n_vertices < 42:
        raise ValueError(f"n_vertices must be >= 42, got {n_vertices}")
    if min(d_shape, d_expr, d_albedo) < 1:
        raise ValueError("d_shape, d_expr and d_albedo must be >= 1")

    levels = icosphere_levels(n_vertices)
    sphere, faces = _icosahedron()
    for _ in range(levels):
        sphere, faces = _subdivide(sphere, faces)
    faces = _orient_outward(sphere, faces)

    x, y, z = sphere[:, 0], sphere[:, 1], sphere[:, 2]
    up = -y
    rest = sphere * np.array([0.78, 1.0, 0.88])
    rest[:, 2] += 0.12 * _ramp((-0.35 - up) / 0.3) * _ramp(z / 0.4)
    rest[:, 2] += 0.12 * np.exp(-(x ** 2 + (up + 0.05) ** 2) / 0.02) * (z > 0)
    radius = float(np.linalg.norm(rest - rest.mean(axis=0), axis=1).max())

    eye_dirs = np.array([[-0.35, -0.25, 0.9], [0.35, -0.25, 0.9]])
    eye_dirs /= np.linalg.norm(eye_dirs, axis=1, keepdims=True)
    eye_angle = np.arccos(np.clip(sphere @ eye_dirs.T, -1.0, 1.0))  # (n, 2)

    w_neck = _ramp((-0.75 - up) / 0.15)
    w_jaw = _ramp((-0.3 - up) / 0.25) * _ramp((z + 0.3) / 0.3) * (1.0 - w_neck)
    w_eyes = [_ramp((0.24 - eye_angle[:, i]) / 0.08) for i in range(2)]
    others = np.stack([w_neck, w_jaw, w_eyes[0], w_eyes[1]])
    total = others.sum(axis=0)
    others = others / np.maximum(total, 1.0)
    blendweights = np.vstack([1.0 - others.sum(axis=0), others])
    blendweights = np.clip(blendweights, 0.0, None)
    blendweights /= blendweights.sum(axis=0, keepdims=True)

    joint_regressor = np.stack([
        np.full(len(rest), 1.0 / len(rest)),
        _group_regressor(up < -0.8, sphere, np.array([0.0, 1.0, 0.0])),
        _group_regressor((np.abs(x) > 0.85) & (up > -0.2) & (up < 0.0), sphere, np.array([1.0, 0.1, 0.0])),
        _group_regressor(eye_angle[:, 0] < 0.24, sphere, eye_dirs[0]),
        _group_regressor(eye_angle[:, 1] < 0.24, sphere, eye_dirs[1]),
    ])

    rng = np.random.default_rng(seed)
    features = _monomials(sphere, degree=3)
    shape_basis = _orthogonal_basis(features, d_shape, rng, radius)
    lower_face = 0.2 + 0.8 * _ramp((0.1 - up) / 0.4) * _ramp((z + 0.2) / 0.4)
    expr_basis = _orthogonal_basis(features * lower_face[:, None], d_expr, rng, radius)

    corrective = np.einsum("nf,fcp->ncp", features, rng.standard_normal((features.shape[1], 3, 9 * NUM_JOINTS)))
    locality = np.repeat(blendweights[1:], 9, axis=0).T  # (n, 9k)
    corrective = corrective * locality[:, None, :]
    peak = np.maximum(np.linalg.norm(corrective, axis=1).max(axis=0), 1e-12)
    pose_corrective_basis = corrective * (0.02 * radius / peak)

    albedo_mean = np.ones((len(rest), 3))
    eye_mask = np.maximum(w_eyes[0], w_eyes[1])
    albedo_mean = albedo_mean * (1.0 - 0.75 * eye_mask[:, None])
    lips = _ramp((0.06 - np.abs(up + 0.42)) / 0.04) * _ramp((0.28 - np.abs(x)) / 0.08) * (z > 0.5)
    albedo_mean = albedo_mean * (1.0 - lips[:, None] * np.array([-0.1, 0.35, 0.3]))
    albedo_basis = np.einsum("nf,fcd->ncd", features, rng.standard_normal((features.shape[1], 3, d_albedo)))
    albedo_basis *= 0.08 / np.linalg.norm(albedo_basis, axis=1).max(axis=0)

    logger.debug(f"Built toy template: {len(rest)} vertices, {len(faces)} faces, seed={seed}")
    return HeadTemplate(
        vertices_rest=rest,
        faces=faces,
        shape_basis=shape_basis,
        expr_basis=expr_basis,
        pose_corrective_basis=pose_corrective_basis,
        joint_regressor=joint_regressor,
        blendweights=blendweights,
        albedo_mean=albedo_mean,
        albedo_basis=albedo_basis,
        parents=PARENTS.copy(),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Forward model
# ---------------------------------------------------------------------------

def axis_angle_to_matrix(rotvec: np.ndarray) -> np.ndarray:
    """
    Exponential map from axis-angle vectors (..., 3) to rotation matrices (..., 3, 3).

    Uses R = I + (sin θ/θ)·K + ((1 - cos θ)/θ²)·K² with the unnormalized skew
    matrix K, switching to Taylor coefficients below ``SMALL_ANGLE``.
    """
    rotvec = np.asarray(rotvec, dtype=np.float64)
    theta = np.linalg.norm(rotvec, axis=-1)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta ** 2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta ** 2 / 24.0, (1.0 - np.cos(safe)) / safe ** 2)

    rx, ry, rz = rotvec[..., 0], rotvec[..., 1], rotvec[..., 2]
    zeros = np.zeros_like(rx)
    skew = np.stack([
        np.stack([zeros, -rz, ry], axis=-1),
        np.stack([rz, zeros, -rx], axis=-1),
        np.stack([-ry, rx, zeros], axis=-1),
    ], axis=-2)
    eye = np.broadcast_to(np.eye(3), skew.shape)
    return eye + a[..., None, None] * skew + b[..., None, None] * (skew @ skew)


def _check_vector(name: str, value: np.ndarray, dim: int) -> np.ndarray:
    value = np.asarray(value, dtype=np.float64)
    if value.shape != (dim,):
        raise ValueError(f"{name} must have shape ({dim},), got {value.shape}")
    if not np.all(np.isfinite(value)):
        raise ValueError(f"{name} contains non-finite values")
    return value


def check_pose(pose: np.ndarray, n_joints: int = NUM_JOINTS) -> np.ndarray:
    """Validate a pose vector: 3k+3 finite values, every rotation below π."""
    pose = _check_vector("pose", pose, 3 * n_joints + 3)
    norms = np.linalg.norm(pose.reshape(-1, 3), axis=1)
    if np.any(norms >= np.pi):
        raise ValueError(f"Axis-angle norms must be < pi, got max {norms.max():.4f}")
    return pose


def shaped_joints(template: HeadTemplate, shape: np.ndarray) -> np.ndarray:
    """Joint positions ((k+1)×3) regressed from the shaped rest mesh."""
    shape = _check_vector("shape", shape, template.d_shape)
    shaped = template.vertices_rest + np.einsum("ncd,d->nc", template.shape_basis, shape)
    return template.joint_regressor @ shaped


def pose_feature(pose: np.ndarray) -> np.ndarray:
    """Flattened (R - I) of the non-root joints, the pose-corrective drive."""
    rotations = axis_angle_to_matrix(pose.reshape(-1, 3))[1:]
    return (rotations - np.eye(3)).reshape(-1)


def pose_rest_vertices(
    template: HeadTemplate,
    shape: np.ndarray,
    pose: np.ndarray,
    expression: np.ndarray,
) -> np.ndarray:
    """Rest template plus shape, expression and pose-corrective offsets (T_P)."""
    shape = _check_vector("shape", shape, template.d_shape)
    expression = _check_vector("expression", expression, template.d_expr)
    pose = check_pose(pose, len(template.parents) - 1)

    offsets = np.einsum("ncd,d->nc", template.shape_basis, shape)
    offsets = offsets + np.einsum("ncd,d->nc", template.expr_basis, expression)
    offsets = offsets + np.einsum("ncp,p->nc", template.pose_corrective_basis, pose_feature(pose))
    return template.vertices_rest + offsets


def blend_skin(
    t_p: np.ndarray,
    joints: np.ndarray,
    pose: np.ndarray,
    weights: np.ndarray,
    parents: np.ndarray = PARENTS,
) -> np.ndarray:
    """
    Linear blend skinning.

    Args:
        t_p: (n, 3) posed-rest vertices
        joints: (k+1, 3) rest joint positions
        pose: (3k+3,) axis-angle rotations, root first
        weights: (k+1, n) convex skinning weights
        parents: (k+1,) parent index per joint, -1 for the root

    Returns:
        (n, 3) skinned vertices
    """
    t_p = np.asarray(t_p, dtype=np.float64)
    n_joints = len(parents)
    if joints.shape != (n_joints, 3):
        raise ValueError(f"joints must have shape ({n_joints}, 3), got {joints.shape}")
    if weights.shape != (n_joints, t_p.shape[0]):
        raise ValueError(f"weights must have shape ({n_joints}, {t_p.shape[0]}), got {weights.shape}")
    pose = check_pose(pose, n_joints - 1)

    rotations = axis_angle_to_matrix(pose.reshape(n_joints, 3))
    world = np.zeros((n_joints, 4, 4))
    for i in range(n_joints):
        local = np.eye(4)
        local[:3, :3] = rotations[i]
        parent = parents[i]
        local[:3, 3] = joints[i] - (joints[parent] if parent >= 0 else 0.0)
        world[i] = local if parent < 0 else world[parent] @ local

    relative = world.copy()
    relative[:, :3, 3] -= np.einsum("kij,kj->ki", world[:, :3, :3], joints)
    blended = np.einsum("kn,kij->nij", weights, relative)
    return np.einsum("nij,nj->ni", blended[:, :3, :3], t_p) + blended[:, :3, 3]


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted unit vertex normals."""
    v0, v1, v2 = (vertices[faces[:, i]] for i in range(3))
    face_normals = np.cross(v1 - v0, v2 - v0)
    normals = np.zeros_like(vertices)
    for i in range(3):
        np.add.at(normals, faces[:, i], face_normals)
    return normals / np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-12)


def forward_flame(
    template: HeadTemplate,
    shape: np.ndarray,
    pose: np.ndarray,
    expression: np.ndarray,
) -> Mesh:
    """M(β, ρ, ψ) = W(T_P(β, ρ, ψ), J(β), ρ, W) with recomputed normals."""
    t_p = pose_rest_vertices(template, shape, pose, expression)
    joints = shaped_joints(template, shape)
    vertices = blend_skin(t_p, joints, pose, template.blendweights, template.parents)
    return Mesh(vertices=vertices, faces=template.faces, normals=vertex_normals(vertices, template.faces))


def zero_parameters(template: HeadTemplate) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (np.zeros(template.d_shape), np.zeros(3 * (len(template.parents) - 1) + 3), np.zeros(template.d_expr))


def yaw_pose(yaw: float, n_joints: int = NUM_JOINTS, jaw_open: Optional[float] = None) -> np.ndarray:
    """Pose vector with a global rotation about the vertical axis (radians)."""
    pose = np.zeros(3 * n_joints + 3)
    pose[1] = yaw
    if jaw_open is not None:
        pose[6] = jaw_open
    return pose
