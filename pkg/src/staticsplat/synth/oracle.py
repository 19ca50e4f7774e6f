"""Brute-force reference renderer.

Every visible Gaussian is evaluated at every pixel, sorted once by depth,
and blended with no footprint cut-off and no early termination.
"""

import numpy as np

from ..gaussians import Camera, GaussianCloud, view_color
from ..rasterizer.projection import DEFAULT_SETTINGS
from ..rasterizer.render import RenderOutput


def _project_one(g, cam: Camera, settings):
    x_cam = cam.rotation @ g.position + cam.translation
    x, y, z = x_cam
    if z <= settings.near:
        return None
    u = cam.fx * x / z + cam.cx
    v = cam.fy * y / z + cam.cy
    if abs(u - cam.width / 2) > settings.guard_band * cam.width / 2:
        return None
    if abs(v - cam.height / 2) > settings.guard_band * cam.height / 2:
        return None
    opac = 1.0 / (1.0 + np.exp(-np.clip(g.opacity_logit, -40.0, 40.0)))
    if opac < settings.alpha_min:
        return None
    jac = np.array([[cam.fx / z, 0.0, -cam.fx * x / z**2], [0.0, cam.fy / z, -cam.fy * y / z**2]])
    t = jac @ cam.rotation
    cov2 = t @ g.covariance @ t.T + settings.blur * np.eye(2)
    rot = _rotation(g.rotation)
    axis = int(np.argmin(g.log_scale))
    normal = cam.rotation @ rot[:, axis]
    if normal @ x_cam > 0:
        normal = -normal
    view = g.position - cam.center
    color = view_color(g, view / np.linalg.norm(view))
    return np.array([u, v]), np.linalg.inv(cov2), z, color, opac, normal


def _rotation(q):
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
        ]
    )


def oracle_render(cloud: GaussianCloud, cam: Camera, background=(0.0, 0.0, 0.0), settings=DEFAULT_SETTINGS):
    background = np.asarray(background, dtype=np.float64)
    h, w = cam.height, cam.width
    items = []
    for i in range(len(cloud)):
        res = _project_one(cloud[i], cam, settings)
        if res is not None:
            items.append((res[2], i, res))
    items.sort(key=lambda item: (item[0], item[1]))

    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    pix = np.stack([uu.ravel(), vv.ravel()], axis=1)
    n_pix = pix.shape[0]
    color = np.zeros((n_pix, 3))
    depth_acc = np.zeros(n_pix)
    normal_acc = np.zeros((n_pix, 3))
    t = np.ones(n_pix)
    count = np.zeros(n_pix, dtype=np.int64)
    for _, _, (mean, conic, z, col, opac, normal) in items:
        d = pix - mean
        q = np.einsum("pi,ij,pj->p", d, conic, d)
        a = np.minimum(settings.alpha_max, opac * np.exp(-0.5 * q))
        wgt = a * t
        color += wgt[:, None] * col
        depth_acc += wgt * z
        normal_acc += wgt[:, None] * normal
        count += a > 0
        t = t * (1.0 - a)
    alpha = 1.0 - t
    color = color + t[:, None] * background
    depth = np.where(alpha > 1e-6, depth_acc / np.maximum(alpha, 1e-6), 0.0)
    n_len = np.linalg.norm(normal_acc, axis=1, keepdims=True)
    normal = np.where(n_len > 1e-12, normal_acc / np.maximum(n_len, 1e-12), 0.0)
    return RenderOutput(
        color=color.reshape(h, w, 3),
        alpha=alpha.reshape(h, w),
        depth=depth.reshape(h, w),
        normal=normal.reshape(h, w, 3),
        contributors=count.reshape(h, w),
    )
