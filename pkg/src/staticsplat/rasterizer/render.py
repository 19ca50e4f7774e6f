"""Tile-based splatting renderer with color, alpha, depth and normal outputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..gaussians import Camera, GaussianCloud
from . import _kernels
from .projection import DEFAULT_SETTINGS, ProjectedSplats, RasterSettings, project, project_backward
from .tiles import TileGrid, build_tiles

DEPTH_ALPHA_EPS = 1e-6
NORMAL_EPS = 1e-12


@dataclass(eq=False)
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    depth: np.ndarray  # (H, W), 0 where nothing was hit
    normal: np.ndarray  # (H, W, 3) camera frame, 0 where nothing was hit
    contributors: np.ndarray  # (H, W) int


@dataclass(eq=False)
class RenderContext:
    splats: ProjectedSplats
    tiles: TileGrid
    accum: np.ndarray
    final_t: np.ndarray
    last: np.ndarray
    background: np.ndarray
    settings: RasterSettings


@dataclass(eq=False)
class CloudGradients:
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    mean2d: np.ndarray  # dL/d(pixel-space mean), for densification statistics
    visible: np.ndarray  # bool per Gaussian

    def parameter_arrays(self) -> dict:
        return {
            "positions": self.positions,
            "rotations": self.rotations,
            "log_scales": self.log_scales,
            "opacity_logits": self.opacity_logits,
            "sh": self.sh,
        }

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.parameter_arrays().values())


def composite_pixel(splats, background, alpha_max: float = 0.99, transmittance_eps: float = 0.0):
    """Front-to-back blend of ``(color, opacity, gaussian_weight)`` triples.

    Returns ``(rgb, alpha)``. The transmittance cut-off is disabled by default.
    """
    background = np.asarray(background, dtype=np.float64)
    rgb = np.zeros(3)
    t = 1.0
    for color, opac, weight in splats:
        a = min(alpha_max, max(0.0, float(opac) * float(weight)))
        rgb += np.asarray(color, dtype=np.float64) * a * t
        t *= 1.0 - a
        if t < transmittance_eps:
            break
    return rgb + background * t, 1.0 - t


def _finish(accum, final_t, last, count, background):
    alpha = 1.0 - final_t
    color = accum[..., 0:3] + final_t[..., None] * background
    depth = np.where(alpha > DEPTH_ALPHA_EPS, accum[..., 3] / np.maximum(alpha, DEPTH_ALPHA_EPS), 0.0)
    n_acc = accum[..., 4:7]
    n_len = np.linalg.norm(n_acc, axis=-1)
    normal = np.where((n_len > NORMAL_EPS)[..., None], n_acc / np.maximum(n_len, NORMAL_EPS)[..., None], 0.0)
    return RenderOutput(color=color, alpha=alpha, depth=depth, normal=normal, contributors=count)


def render(
    cloud: GaussianCloud,
    cam: Camera,
    background=(0.0, 0.0, 0.0),
    settings: RasterSettings = DEFAULT_SETTINGS,
    return_context: bool = False,
):
    background = np.asarray(background, dtype=np.float64).reshape(3)
    splats = project(cloud, cam, settings)
    tiles = build_tiles(splats, cam.width, cam.height, settings.tile_size, settings.max_pairs)
    qcut = _kernels.q_cutoff(splats.opacity, settings.alpha_min)
    accum, final_t, last, count = _kernels.forward_tiles(
        tiles.ranges,
        tiles.pair_splat,
        splats.mean2d,
        splats.conic,
        splats.opacity,
        qcut,
        _kernels.support_bounds(splats.mean2d, splats.conic, qcut),
        np.ascontiguousarray(splats.features()),
        cam.width,
        cam.height,
        tiles.tile_size,
        tiles.n_tiles_x,
        settings.alpha_min,
        settings.alpha_max,
        settings.transmittance_eps,
    )
    out = _finish(accum, final_t, last, count, background)
    if return_context:
        return out, RenderContext(splats, tiles, accum, final_t, last, background, settings)
    return out


def render_backward(
    cloud: GaussianCloud,
    cam: Camera,
    background=(0.0, 0.0, 0.0),
    grad_color=None,
    grad_depth=None,
    grad_normal=None,
    grad_alpha=None,
    context: RenderContext | None = None,
    settings: RasterSettings = DEFAULT_SETTINGS,
) -> CloudGradients:
    """Analytic gradients of a scalar loss w.r.t. every cloud parameter.

    Upstream gradients are per-pixel dL/d(output map); omitted maps are zero.
    Pass the ``context`` from ``render(..., return_context=True)`` to skip
    recomputing the forward pass.
    """
    if context is None:
        _, context = render(cloud, cam, background, settings, return_context=True)
    h, w = cam.height, cam.width
    accum, final_t = context.accum, context.final_t
    alpha = 1.0 - final_t

    g_feat = np.zeros((h, w, _kernels.NUM_FEATURES))
    g_alpha = np.zeros((h, w)) if grad_alpha is None else np.array(grad_alpha, dtype=np.float64)
    if grad_color is not None:
        g_feat[..., 0:3] = grad_color
    if grad_depth is not None:
        hit = alpha > DEPTH_ALPHA_EPS
        safe = np.maximum(alpha, DEPTH_ALPHA_EPS)
        g_feat[..., 3] = np.where(hit, grad_depth / safe, 0.0)
        g_alpha = g_alpha - np.where(hit, grad_depth * accum[..., 3] / safe**2, 0.0)
    if grad_normal is not None:
        n_acc = accum[..., 4:7]
        n_len = np.linalg.norm(n_acc, axis=-1, keepdims=True)
        ok = n_len > NORMAL_EPS
        n_hat = n_acc / np.maximum(n_len, NORMAL_EPS)
        proj = grad_normal - n_hat * np.sum(n_hat * grad_normal, axis=-1, keepdims=True)
        g_feat[..., 4:7] = np.where(ok, proj / np.maximum(n_len, NORMAL_EPS), 0.0)

    splats, tiles = context.splats, context.tiles
    s = context.settings
    qcut = _kernels.q_cutoff(splats.opacity, s.alpha_min)
    pair_grads = _kernels.backward_tiles(
        tiles.ranges,
        tiles.pair_splat,
        splats.mean2d,
        splats.conic,
        splats.opacity,
        qcut,
        _kernels.support_bounds(splats.mean2d, splats.conic, qcut),
        np.ascontiguousarray(splats.features()),
        w,
        h,
        tiles.tile_size,
        tiles.n_tiles_x,
        s.alpha_min,
        s.alpha_max,
        final_t,
        context.last,
        g_feat,
        g_alpha,
        context.background,
    )
    local = np.stack(
        [np.bincount(tiles.pair_splat, weights=pair_grads[:, j], minlength=len(splats))
         for j in range(_kernels.PAIR_GRAD_WIDTH)],
        axis=1,
    ).reshape(len(splats), _kernels.PAIR_GRAD_WIDTH)

    grads = project_backward(
        cloud,
        cam,
        splats,
        grad_mean2d=local[:, 0:2],
        grad_conic=local[:, 2:5],
        grad_opacity=local[:, 5],
        grad_feat=local[:, 6:],
    )
    visible = np.zeros(len(cloud), dtype=bool)
    visible[splats.index] = True
    return CloudGradients(visible=visible, **grads)
