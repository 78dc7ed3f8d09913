"""
Head geometry: the miniature morphable model, coefficient records and the
SH rasterizer.
"""

from .coefficients import (
    AlbedoParams,
    PhysicalCoefficients,
    WeakPerspectiveCamera,
    attribute_slices,
    build_edit_coefficients,
    changed_fields,
    load_coefficients,
    save_coefficients,
)
from .flame_lite import (
    HeadTemplate,
    Mesh,
    axis_angle_to_matrix,
    blend_skin,
    forward_flame,
    load_template,
    make_toy_template,
    pose_rest_vertices,
    save_template,
    shaped_joints,
    vertex_normals,
)
from .renderer import RenderedTexture, project, rasterize, render_condition, sh_basis, sh_shade

__all__ = [
    "AlbedoParams",
    "PhysicalCoefficients",
    "WeakPerspectiveCamera",
    "attribute_slices",
    "build_edit_coefficients",
    "changed_fields",
    "load_coefficients",
    "save_coefficients",
    "HeadTemplate",
    "Mesh",
    "axis_angle_to_matrix",
    "blend_skin",
    "forward_flame",
    "load_template",
    "make_toy_template",
    "pose_rest_vertices",
    "save_template",
    "shaped_joints",
    "vertex_normals",
    "RenderedTexture",
    "project",
    "rasterize",
    "render_condition",
    "sh_basis",
    "sh_shade",
]
