"""Differentiable tile-based Gaussian splatting."""

from .projection import (
    DEFAULT_SETTINGS,
    ProjectedSplat,
    ProjectedSplats,
    RasterSettings,
    project,
    project_backward,
    project_point,
)
from .render import CloudGradients, RenderContext, RenderOutput, composite_pixel, render, render_backward
from .tiles import TileGrid, build_tiles

__all__ = [
    "DEFAULT_SETTINGS",
    "CloudGradients",
    "ProjectedSplat",
    "ProjectedSplats",
    "RasterSettings",
    "RenderContext",
    "RenderOutput",
    "TileGrid",
    "build_tiles",
    "composite_pixel",
    "project",
    "project_backward",
    "project_point",
    "render",
    "render_backward",
]
