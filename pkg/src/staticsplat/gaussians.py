"""Gaussian primitives, cameras and their closed-form math."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import sh as _sh
from .exceptions import DegenerateGaussianError, InvalidParameterError, MalformedCameraError

JITTER = 1e-9
CONDITION_LIMIT = 1e12
LOGIT_CLAMP = 40.0


def sigmoid(x):
    x = np.clip(np.asarray(x, dtype=np.float64), -LOGIT_CLAMP, LOGIT_CLAMP)
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def normalize_quaternion(q):
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise InvalidParameterError("quaternion must be non-zero")
    return q / norm


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (w, x, y, z) quaternions; accepts (4,) or (N, 4)."""
    q = normalize_quaternion(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rot = np.empty(q.shape[:-1] + (3, 3))
    rot[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    rot[..., 0, 1] = 2.0 * (x * y - w * z)
    rot[..., 0, 2] = 2.0 * (x * z + w * y)
    rot[..., 1, 0] = 2.0 * (x * y + w * z)
    rot[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    rot[..., 1, 2] = 2.0 * (y * z - w * x)
    rot[..., 2, 0] = 2.0 * (x * z - w * y)
    rot[..., 2, 1] = 2.0 * (y * z + w * x)
    rot[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return rot


def matrix_to_quaternion(rot: np.ndarray) -> np.ndarray:
    """Inverse of :func:`quaternion_to_matrix` for a batch of proper rotations."""
    rot = np.asarray(rot, dtype=np.float64)
    single = rot.ndim == 2
    rot = rot.reshape(-1, 3, 3)
    out = np.empty((rot.shape[0], 4))
    for i, m in enumerate(rot):
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0:
            s = np.sqrt(tr + 1.0) * 2.0
            out[i] = (0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s)
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            out[i] = ((m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s)
        elif m[1, 1] > m[2, 2]:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
            out[i] = ((m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s)
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
            out[i] = ((m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s)
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    return out[0] if single else out


def build_covariance(rotation, log_scale) -> np.ndarray:
    """Covariance ``R S S^T R^T`` with ``S = diag(exp(log_scale))``.

    Works on a single Gaussian ((4,), (3,)) or a batch ((N, 4), (N, 3)).
    """
    rotation = np.asarray(rotation, dtype=np.float64)
    log_scale = np.asarray(log_scale, dtype=np.float64)
    if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(log_scale))):
        raise InvalidParameterError("rotation and log_scale must be finite")
    rot = quaternion_to_matrix(rotation)
    m = rot * np.exp(log_scale)[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


def covariance_upper(cov: np.ndarray) -> np.ndarray:
    """Six upper-triangle entries (xx, xy, xz, yy, yz, zz)."""
    return np.stack(
        [cov[..., 0, 0], cov[..., 0, 1], cov[..., 0, 2], cov[..., 1, 1], cov[..., 1, 2], cov[..., 2, 2]],
        axis=-1,
    )


def _safe_inverse(cov: np.ndarray) -> np.ndarray:
    if np.linalg.cond(cov) > CONDITION_LIMIT:
        cov = cov + JITTER * np.eye(3)
    det = np.linalg.det(cov)
    if not np.isfinite(det) or det <= 0.0:
        raise DegenerateGaussianError("covariance is singular even after jitter")
    return np.linalg.inv(cov)


@dataclass(frozen=True, eq=False)
class GaussianPoint:
    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    sh_coeffs: np.ndarray  # (K, 3)

    @property
    def sh_degree(self) -> int:
        return _sh.degree_from_coeffs(self.sh_coeffs.shape[0])

    @property
    def covariance(self) -> np.ndarray:
        return build_covariance(self.rotation, self.log_scale)


def opacity(g: GaussianPoint) -> float:
    return float(sigmoid(g.opacity_logit))


def eval_density(g: GaussianPoint, x) -> float:
    """Unnormalized Gaussian density in (0, 1] at world point ``x``."""
    diff = np.asarray(x, dtype=np.float64) - g.position
    inv = _safe_inverse(g.covariance)
    return float(np.exp(-0.5 * diff @ inv @ diff))


def view_color(g: GaussianPoint, view_dir) -> np.ndarray:
    view_dir = np.asarray(view_dir, dtype=np.float64).reshape(1, 3)
    basis = _sh.sh_basis(view_dir, g.sh_degree)[0]
    return np.clip(basis @ g.sh_coeffs + 0.5, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class GaussianCloud:
    """Structure-of-arrays container for N Gaussians.

    ``sh`` has shape (N, K, 3) with K = (sh_degree + 1) ** 2. ``tags`` records
    the training iteration at which each Gaussian was created.
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    sh_degree: int = 3
    tags: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.positions.shape[0]
        if self.tags is None:
            object.__setattr__(self, "tags", np.zeros(n, dtype=np.int64))
        k = _sh.num_coeffs(self.sh_degree)
        shapes = {
            "positions": (n, 3),
            "rotations": (n, 4),
            "log_scales": (n, 3),
            "opacity_logits": (n,),
            "sh": (n, k, 3),
            "tags": (n,),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise InvalidParameterError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @classmethod
    def empty(cls, sh_degree: int = 3) -> "GaussianCloud":
        k = _sh.num_coeffs(sh_degree)
        return cls(
            positions=np.zeros((0, 3)),
            rotations=np.zeros((0, 4)),
            log_scales=np.zeros((0, 3)),
            opacity_logits=np.zeros(0),
            sh=np.zeros((0, k, 3)),
            sh_degree=sh_degree,
        )

    @classmethod
    def from_points(cls, positions, colors, scales, opacities=0.1, sh_degree=3, rotations=None, tag=0):
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = positions.shape[0]
        colors = np.broadcast_to(np.asarray(colors, dtype=np.float64), (n, 3))
        scales = np.asarray(scales, dtype=np.float64)
        if scales.ndim <= 1:
            scales = np.repeat(np.broadcast_to(scales, (n,))[:, None], 3, axis=1)
        if rotations is None:
            rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        sh = np.zeros((n, _sh.num_coeffs(sh_degree), 3))
        sh[:, 0, :] = _sh.rgb_to_dc(colors)
        return cls(
            positions=positions,
            rotations=np.asarray(rotations, dtype=np.float64).reshape(n, 4),
            log_scales=np.log(scales),
            opacity_logits=np.broadcast_to(logit(opacities), (n,)).astype(np.float64),
            sh=sh,
            sh_degree=sh_degree,
            tags=np.full(n, tag, dtype=np.int64),
        )

    def __len__(self) -> int:
        return self.positions.shape[0]

    def __getitem__(self, i: int) -> GaussianPoint:
        return GaussianPoint(
            position=self.positions[i],
            rotation=self.rotations[i],
            log_scale=self.log_scales[i],
            opacity_logit=float(self.opacity_logits[i]),
            sh_coeffs=self.sh[i],
        )

    def replace(self, **changes) -> "GaussianCloud":
        return dataclasses.replace(self, **changes)

    def take(self, index) -> "GaussianCloud":
        index = np.asarray(index)
        if index.dtype != bool:
            index = index.astype(np.int64)
        return GaussianCloud(
            positions=self.positions[index],
            rotations=self.rotations[index],
            log_scales=self.log_scales[index],
            opacity_logits=self.opacity_logits[index],
            sh=self.sh[index],
            sh_degree=self.sh_degree,
            tags=self.tags[index],
        )

    def concat(self, other: "GaussianCloud") -> "GaussianCloud":
        if other.sh_degree != self.sh_degree:
            raise InvalidParameterError("cannot concatenate clouds with different SH degrees")
        return GaussianCloud(
            positions=np.concatenate([self.positions, other.positions]),
            rotations=np.concatenate([self.rotations, other.rotations]),
            log_scales=np.concatenate([self.log_scales, other.log_scales]),
            opacity_logits=np.concatenate([self.opacity_logits, other.opacity_logits]),
            sh=np.concatenate([self.sh, other.sh]),
            sh_degree=self.sh_degree,
            tags=np.concatenate([self.tags, other.tags]),
        )

    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def rotation_matrices(self) -> np.ndarray:
        return quaternion_to_matrix(self.rotations)

    def covariances(self) -> np.ndarray:
        return build_covariance(self.rotations, self.log_scales)

    def validate(self, iteration: int | None = None) -> None:
        for name in ("positions", "rotations", "log_scales", "opacity_logits", "sh"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidParameterError(f"non-finite values in {name}")
        if np.any(np.linalg.norm(self.rotations, axis=1) == 0.0):
            raise InvalidParameterError("zero quaternion in cloud")
        if not np.all(np.isfinite(self.scales())) or np.any(self.scales() <= 0.0):
            raise InvalidParameterError("scales must be strictly positive and finite")
        if iteration is not None and len(self) and self.tags.max() > iteration:
            raise InvalidParameterError("creation tag exceeds current iteration")


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera; ``X_cam = rotation @ X_world + translation`` with z forward.

    Pixel centers sit at integer coordinates: column ``u``, row ``v``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        if rot.shape != (3, 3) or trans.shape != (3,):
            raise MalformedCameraError("camera rotation must be 3x3 and translation a 3-vector")
        values = [self.fx, self.fy, self.cx, self.cy]
        if not (np.all(np.isfinite(values)) and np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise MalformedCameraError("camera parameters must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise MalformedCameraError("focal lengths must be positive")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise MalformedCameraError("image dimensions must be positive")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-9 or np.linalg.det(rot) <= 0:
            raise MalformedCameraError("rotation must be orthogonal with determinant +1")

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), *, width, height, fx, fy=None, cx=None, cy=None):
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        return cls(
            fx=float(fx),
            fy=float(fx if fy is None else fy),
            cx=float(width / 2.0 if cx is None else cx),
            cy=float(height / 2.0 if cy is None else cy),
            rotation=rot,
            translation=-rot @ eye,
            width=int(width),
            height=int(height),
        )

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [[1.0 / self.fx, 0.0, -self.cx / self.fx], [0.0, 1.0 / self.fy, -self.cy / self.fy], [0.0, 0.0, 1.0]]
        )

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def world_to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def camera_to_world(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def project(self, points):
        """World points -> (pixel coordinates (N, 2), camera depth (N,))."""
        cam = self.world_to_camera(np.atleast_2d(points))
        z = cam[:, 2]
        uv = np.stack([self.fx * cam[:, 0] / z + self.cx, self.fy * cam[:, 1] / z + self.cy], axis=1)
        return uv, z

    def backproject(self, uv, depth) -> np.ndarray:
        """Pixel coordinates at camera depth ``depth`` -> world points."""
        uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
        depth = np.asarray(depth, dtype=np.float64).reshape(-1)
        rays = np.stack([(uv[:, 0] - self.cx) / self.fx, (uv[:, 1] - self.cy) / self.fy, np.ones(len(uv))], axis=1)
        return self.camera_to_world(rays * depth[:, None])

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "rotation": [float(v) for v in self.rotation.reshape(-1)],
            "translation": [float(v) for v in self.translation],
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Camera":
        try:
            return cls(
                fx=float(data["fx"]),
                fy=float(data["fy"]),
                cx=float(data["cx"]),
                cy=float(data["cy"]),
                rotation=np.asarray(data["rotation"], dtype=np.float64).reshape(3, 3),
                translation=np.asarray(data["translation"], dtype=np.float64),
                width=int(data["width"]),
                height=int(data["height"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, MalformedCameraError):
                raise
            raise MalformedCameraError(f"malformed camera record: {exc}") from exc


def relative_transform(reference: Camera, neighbor: Camera):
    """(W_rel, t_rel) with ``X_neighbor = W_rel @ X_reference + t_rel`` for camera-frame points."""
    w_rel = neighbor.rotation @ reference.rotation.T
    t_rel = neighbor.translation - w_rel @ reference.translation
    return w_rel, t_rel
