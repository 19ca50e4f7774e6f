"""Stand-in for a structure-from-motion point cloud."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from ..exceptions import InvalidParameterError
from ..gaussians import GaussianCloud

INIT_OPACITY = 0.1


def nn_scales(points, k: int = 3) -> np.ndarray:
    """Mean distance to the ``k`` nearest other points (fewer if the cloud is small)."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n < 2:
        return np.full(n, 0.01)
    k = min(k, n - 1)
    dist, _ = cKDTree(points).query(points, k=k + 1)
    return np.maximum(dist[:, 1:].mean(axis=1), 1e-7)


def sample_surfaces(scene, n_points: int, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Area-weighted uniform samples on static surfaces: (points, colors, rect index)."""
    areas = np.array([r.area for r in scene.rects])
    which = rng.choice(len(scene.rects), size=n_points, p=areas / areas.sum())
    s = rng.uniform(size=n_points)
    t = rng.uniform(size=n_points)
    points = np.empty((n_points, 3))
    colors = np.empty((n_points, 3))
    for i, rect in enumerate(scene.rects):
        sel = which == i
        if sel.any():
            points[sel] = rect.point(s[sel], t[sel])
            colors[sel] = rect.texture(s[sel], t[sel], scene.seed)
    return points, colors, which


def surrogate_sfm(scene, n_points: int, noise_sigma: float = 0.0, seed: int = 0, sh_degree: int = 3) -> GaussianCloud:
    if n_points < 1:
        raise InvalidParameterError("n_points must be >= 1")
    if noise_sigma < 0:
        raise InvalidParameterError("noise_sigma must be non-negative")
    rng = np.random.default_rng(seed)
    points, colors, _ = sample_surfaces(scene, n_points, rng)
    if noise_sigma > 0:
        points = points + rng.normal(scale=noise_sigma, size=points.shape)
    return GaussianCloud.from_points(points, colors, nn_scales(points), opacities=INIT_OPACITY, sh_degree=sh_degree)
