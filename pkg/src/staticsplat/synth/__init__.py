"""Synthetic scenes with exact ground truth, and reference implementations."""

from .oracle import oracle_render
from .scene import (
    DecimatedPlane,
    decimated_plane,
    plane_cloud,
    Mover,
    SyntheticScene,
    TexturedRect,
    box_faces,
    generate,
    planar_scene,
    render_view,
    ring_cameras,
    standard_scene,
)
from .sfm import nn_scales, sample_surfaces, surrogate_sfm

__all__ = [
    "DecimatedPlane",
    "decimated_plane",
    "plane_cloud",
    "Mover",
    "SyntheticScene",
    "TexturedRect",
    "box_faces",
    "generate",
    "nn_scales",
    "oracle_render",
    "planar_scene",
    "render_view",
    "ring_cameras",
    "sample_surfaces",
    "standard_scene",
    "surrogate_sfm",
]
