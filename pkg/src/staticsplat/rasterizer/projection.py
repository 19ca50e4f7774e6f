"""Screen-space projection of Gaussians (EWA) and its analytic adjoint."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import sh as _sh
from ..gaussians import Camera, GaussianCloud, GaussianPoint, quaternion_to_matrix, sigmoid


@dataclass(frozen=True)
class RasterSettings:
    tile_size: int = 16
    near: float = 0.01
    guard_band: float = 1.3
    blur: float = 0.3
    alpha_min: float = 1e-9
    alpha_max: float = 0.99
    transmittance_eps: float = 1e-6
    max_pairs: int = 1 << 26


DEFAULT_SETTINGS = RasterSettings()


@dataclass(frozen=True, eq=False)
class ProjectedSplat:
    mean2d: np.ndarray
    conic: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float
    radius: int
    source_index: int


@dataclass(eq=False)
class ProjectedSplats:
    """Visible splats of one view, plus the intermediates the adjoint needs."""

    index: np.ndarray  # source indices into the cloud
    mean2d: np.ndarray
    conic: np.ndarray  # (a, b, c) of [[a, b], [b, c]]
    depth: np.ndarray
    color: np.ndarray
    opacity: np.ndarray
    normal: np.ndarray  # camera frame, facing the camera
    half_extent: np.ndarray  # (M, 2) bounding half-widths in pixels
    radius: np.ndarray
    # adjoint state
    cam_points: np.ndarray
    cov2d: np.ndarray
    cov_cam: np.ndarray
    rot: np.ndarray
    scales: np.ndarray
    normal_axis: np.ndarray
    normal_sign: np.ndarray
    view_dirs: np.ndarray
    view_norm: np.ndarray
    color_active: np.ndarray

    def __len__(self):
        return self.index.shape[0]

    def features(self) -> np.ndarray:
        return np.concatenate([self.color, self.depth[:, None], self.normal], axis=1)

    def splat(self, i: int) -> ProjectedSplat:
        return ProjectedSplat(
            mean2d=self.mean2d[i],
            conic=self.conic[i],
            depth=float(self.depth[i]),
            color=self.color[i],
            opacity=float(self.opacity[i]),
            radius=int(self.radius[i]),
            source_index=int(self.index[i]),
        )


def project(cloud: GaussianCloud, cam: Camera, settings: RasterSettings = DEFAULT_SETTINGS) -> ProjectedSplats:
    """Project every Gaussian; culled ones are simply absent from the result."""
    w2c = cam.rotation
    t_all = cloud.positions @ w2c.T + cam.translation
    z_all = t_all[:, 2]
    opac_all = sigmoid(cloud.opacity_logits)
    with np.errstate(divide="ignore", invalid="ignore"):
        u_all = cam.fx * t_all[:, 0] / z_all + cam.cx
        v_all = cam.fy * t_all[:, 1] / z_all + cam.cy
    half_w, half_h = cam.width / 2.0, cam.height / 2.0
    keep = (
        (z_all > settings.near)
        & (np.abs(u_all - half_w) <= settings.guard_band * half_w)
        & (np.abs(v_all - half_h) <= settings.guard_band * half_h)
        & (opac_all >= settings.alpha_min)
    )
    idx = np.nonzero(keep)[0]
    t = t_all[idx]
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    mean2d = np.stack([u_all[idx], v_all[idx]], axis=1)

    rot = quaternion_to_matrix(cloud.rotations[idx])
    scales = np.exp(cloud.log_scales[idx])
    m = rot * scales[:, None, :]
    cov3 = m @ np.swapaxes(m, 1, 2)
    cov_cam = w2c @ cov3 @ w2c.T

    jac = np.zeros((len(idx), 2, 3))
    jac[:, 0, 0] = cam.fx / z
    jac[:, 0, 2] = -cam.fx * x / (z * z)
    jac[:, 1, 1] = cam.fy / z
    jac[:, 1, 2] = -cam.fy * y / (z * z)
    cov2 = jac @ cov_cam @ np.swapaxes(jac, 1, 2)
    a = cov2[:, 0, 0] + settings.blur
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1] + settings.blur
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)

    opac = opac_all[idx]
    q_max = 2.0 * np.log(opac / settings.alpha_min)
    half_extent = np.stack([np.sqrt(q_max * a), np.sqrt(q_max * c)], axis=1)
    radius = np.maximum(1, np.ceil(half_extent.max(axis=1))).astype(np.int64)

    normal_axis = np.argmin(cloud.log_scales[idx], axis=1)
    n_world = rot[np.arange(len(idx)), :, normal_axis]
    n_cam = n_world @ w2c.T
    normal_sign = np.where(np.einsum("ij,ij->i", n_cam, t) > 0.0, -1.0, 1.0)
    normal = n_cam * normal_sign[:, None]

    view = cloud.positions[idx] - cam.center
    view_norm = np.linalg.norm(view, axis=1)
    dirs = view / view_norm[:, None]
    basis = _sh.sh_basis(dirs, cloud.sh_degree)
    raw = np.einsum("nk,nkc->nc", basis, cloud.sh[idx]) + 0.5
    color_active = (raw > 0.0) & (raw < 1.0)
    color = np.clip(raw, 0.0, 1.0)

    return ProjectedSplats(
        index=idx,
        mean2d=mean2d,
        conic=conic,
        depth=z.copy(),
        color=color,
        opacity=opac,
        normal=normal,
        half_extent=half_extent,
        radius=radius,
        cam_points=t,
        cov2d=np.stack([a, b, c], axis=1),
        cov_cam=cov_cam,
        rot=rot,
        scales=scales,
        normal_axis=normal_axis,
        normal_sign=normal_sign,
        view_dirs=dirs,
        view_norm=view_norm,
        color_active=color_active,
    )


def project_point(g: GaussianPoint, cam: Camera, settings: RasterSettings = DEFAULT_SETTINGS):
    """Single-Gaussian projection; returns ``None`` when culled."""
    cloud = GaussianCloud(
        positions=g.position[None],
        rotations=g.rotation[None],
        log_scales=g.log_scale[None],
        opacity_logits=np.array([g.opacity_logit]),
        sh=g.sh_coeffs[None],
        sh_degree=g.sh_degree,
    )
    splats = project(cloud, cam, settings)
    return splats.splat(0) if len(splats) else None


def _rotation_grad_to_quaternion(quats: np.ndarray, grad_rot: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(quats, axis=1, keepdims=True)
    qn = quats / norm
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    g = grad_rot
    dw = 2.0 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    dx = 2.0 * (
        y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2.0 * x * g[:, 1, 1]
        - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2.0 * x * g[:, 2, 2]
    )
    dy = 2.0 * (
        -2.0 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
        + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2.0 * y * g[:, 2, 2]
    )
    dz = 2.0 * (
        -2.0 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
        - 2.0 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1]
    )
    dqn = np.stack([dw, dx, dy, dz], axis=1)
    # back through q / |q|
    return (dqn - qn * np.einsum("ij,ij->i", qn, dqn)[:, None]) / norm


def project_backward(
    cloud: GaussianCloud,
    cam: Camera,
    splats: ProjectedSplats,
    grad_mean2d: np.ndarray,
    grad_conic: np.ndarray,
    grad_opacity: np.ndarray,
    grad_feat: np.ndarray,
):
    """Chain splat-level gradients back to cloud parameters.

    ``grad_conic`` is w.r.t. (a, b, c) where the quadratic form is
    ``a dx^2 + 2 b dx dy + c dy^2``. ``grad_feat`` columns follow
    :meth:`ProjectedSplats.features`. Returns a dict of full-size arrays.
    """
    n = len(cloud)
    idx = splats.index
    w2c = cam.rotation
    t = splats.cam_points
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    fx, fy = cam.fx, cam.fy

    # conic -> 2D covariance: dL/dCov = -Conic G Conic, G symmetric
    ca, cb, cc = splats.conic[:, 0], splats.conic[:, 1], splats.conic[:, 2]
    conic_m = np.empty((len(idx), 2, 2))
    conic_m[:, 0, 0], conic_m[:, 0, 1], conic_m[:, 1, 0], conic_m[:, 1, 1] = ca, cb, cb, cc
    g_con = np.empty_like(conic_m)
    g_con[:, 0, 0] = grad_conic[:, 0]
    g_con[:, 0, 1] = g_con[:, 1, 0] = 0.5 * grad_conic[:, 1]
    g_con[:, 1, 1] = grad_conic[:, 2]
    g_cov2 = -conic_m @ g_con @ conic_m

    jac = np.zeros((len(idx), 2, 3))
    jac[:, 0, 0] = fx / z
    jac[:, 0, 2] = -fx * x / (z * z)
    jac[:, 1, 1] = fy / z
    jac[:, 1, 2] = -fy * y / (z * z)
    jt = np.swapaxes(jac, 1, 2)
    g_cov_cam = jt @ g_cov2 @ jac
    g_jac = 2.0 * g_cov2 @ jac @ splats.cov_cam
    g_cov3 = w2c.T @ g_cov_cam @ w2c

    # camera-frame position
    g_t = np.zeros((len(idx), 3))
    g_t[:, 0] += grad_mean2d[:, 0] * fx / z
    g_t[:, 1] += grad_mean2d[:, 1] * fy / z
    g_t[:, 2] += -grad_mean2d[:, 0] * fx * x / (z * z) - grad_mean2d[:, 1] * fy * y / (z * z)
    g_t[:, 2] += -g_jac[:, 0, 0] * fx / (z * z) - g_jac[:, 1, 1] * fy / (z * z)
    g_t[:, 0] += -g_jac[:, 0, 2] * fx / (z * z)
    g_t[:, 1] += -g_jac[:, 1, 2] * fy / (z * z)
    g_t[:, 2] += g_jac[:, 0, 2] * 2.0 * fx * x / z**3 + g_jac[:, 1, 2] * 2.0 * fy * y / z**3
    g_t[:, 2] += grad_feat[:, 3]
    g_pos = g_t @ w2c

    # covariance -> rotation and log-scale
    rot = splats.rot
    s2 = splats.scales**2
    g_rot = 2.0 * g_cov3 @ rot * s2[:, None, :]
    rgr = np.swapaxes(rot, 1, 2) @ g_cov3 @ rot
    g_log_scale = 2.0 * np.diagonal(rgr, axis1=1, axis2=2) * s2

    # normal = sign * W R[:, k]
    g_nworld = (grad_feat[:, 4:7] * splats.normal_sign[:, None]) @ w2c
    g_rot[np.arange(len(idx)), :, splats.normal_axis] += g_nworld
    g_quat = _rotation_grad_to_quaternion(cloud.rotations[idx], g_rot)

    # view-dependent color
    g_color = grad_feat[:, 0:3] * splats.color_active
    basis = _sh.sh_basis(splats.view_dirs, cloud.sh_degree)
    g_sh = basis[:, :, None] * g_color[:, None, :]
    if cloud.sh_degree > 0:
        jac_basis = _sh.sh_basis_jacobian(splats.view_dirs, cloud.sh_degree)
        g_dir = np.einsum("nc,nkc,nkj->nj", g_color, cloud.sh[idx], jac_basis)
        d = splats.view_dirs
        g_dir = (g_dir - d * np.einsum("ij,ij->i", d, g_dir)[:, None]) / splats.view_norm[:, None]
        g_pos = g_pos + g_dir

    opac = splats.opacity
    g_logit = grad_opacity * opac * (1.0 - opac)

    out = {
        "positions": np.zeros((n, 3)),
        "rotations": np.zeros((n, 4)),
        "log_scales": np.zeros((n, 3)),
        "opacity_logits": np.zeros(n),
        "sh": np.zeros_like(cloud.sh),
        "mean2d": np.zeros((n, 2)),
    }
    out["positions"][idx] = g_pos
    out["rotations"][idx] = g_quat
    out["log_scales"][idx] = g_log_scale
    out["opacity_logits"][idx] = g_logit
    out["sh"][idx] = g_sh
    out["mean2d"][idx] = grad_mean2d
    return out
