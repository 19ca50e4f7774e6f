"""Procedural scenes rendered by exact ray casting.

Static geometry is a set of textured rectangles (a box is five of them);
movers are spheres travelling along a linear or circular path, present in a
contiguous range of frames.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..dataset import Dataset, Frame
from ..exceptions import InvalidParameterError
from ..gaussians import Camera


@dataclass
class TexturedRect:
    origin: list
    edge_u: list
    edge_v: list
    base_color: list
    checks: int = 6
    noise_res: int = 8
    noise_amp: float = 0.25
    noise_seed: int = 0

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.edge_u, self.edge_v)
        return n / np.linalg.norm(n)

    @property
    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.edge_u, self.edge_v)))

    def point(self, s, t) -> np.ndarray:
        s = np.asarray(s)[..., None]
        t = np.asarray(t)[..., None]
        return np.asarray(self.origin) + s * np.asarray(self.edge_u) + t * np.asarray(self.edge_v)

    def texture(self, s, t, scene_seed: int = 0) -> np.ndarray:
        s = np.clip(np.asarray(s, dtype=np.float64), 0.0, 1.0)
        t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
        checker = (np.floor(s * self.checks) + np.floor(t * self.checks)) % 2
        rng = np.random.default_rng([scene_seed, self.noise_seed])
        grid = rng.uniform(size=(3, self.noise_res + 1, self.noise_res + 1))
        gs, gt = s * self.noise_res, t * self.noise_res
        i0 = np.minimum(np.floor(gs).astype(int), self.noise_res - 1)
        j0 = np.minimum(np.floor(gt).astype(int), self.noise_res - 1)
        fs, ft = gs - i0, gt - j0
        noise = (
            grid[:, i0, j0] * (1 - fs) * (1 - ft)
            + grid[:, i0 + 1, j0] * fs * (1 - ft)
            + grid[:, i0, j0 + 1] * (1 - fs) * ft
            + grid[:, i0 + 1, j0 + 1] * fs * ft
        )
        base = np.asarray(self.base_color, dtype=np.float64)
        color = base * (0.55 + 0.45 * checker[..., None]) + self.noise_amp * (np.moveaxis(noise, 0, -1) - 0.5)
        return np.clip(color, 0.0, 1.0)


def box_faces(center, half_size, colors, seed: int = 0, checks: int = 3) -> list[TexturedRect]:
    """Five textured faces of an axis-aligned box resting on its bottom face."""
    c = np.asarray(center, dtype=np.float64)
    hx, hy, hz = half_size
    ex, ey, ez = np.array([2 * hx, 0, 0]), np.array([0, 2 * hy, 0]), np.array([0, 0, 2 * hz])
    lo = c - np.array([hx, hy, hz])
    faces = [
        (lo, ex, ez),  # y-
        (lo + ey + ex, -ex, ez),  # y+
        (lo + ex, ey, ez),  # x+
        (lo + ey, -ey, ez),  # x-
        (lo + ez, ex, ey),  # top
    ]
    out = []
    for i, (o, u, v) in enumerate(faces):
        out.append(
            TexturedRect(
                origin=o.tolist(), edge_u=u.tolist(), edge_v=v.tolist(),
                base_color=list(colors[i % len(colors)]), checks=checks, noise_seed=seed + i,
            )
        )
    return out


@dataclass
class Mover:
    radius: float
    color: list
    first_frame: int
    last_frame: int
    start: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    end: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    path: str = "linear"  # or "circular": start is the orbit center, end = (orbit radius, angle0, angle1)

    def position(self, frame: int):
        if not self.first_frame <= frame <= self.last_frame:
            return None
        span = max(self.last_frame - self.first_frame, 1)
        f = (frame - self.first_frame) / span
        if self.path == "linear":
            return np.asarray(self.start) + f * (np.asarray(self.end) - np.asarray(self.start))
        if self.path == "circular":
            r, a0, a1 = self.end
            ang = a0 + f * (a1 - a0)
            return np.asarray(self.start) + r * np.array([np.cos(ang), np.sin(ang), 0.0])
        raise InvalidParameterError(f"unknown mover path {self.path!r}")


@dataclass
class SyntheticScene:
    rects: list
    cameras: list  # list[Camera]
    movers: list = field(default_factory=list)
    heldout_cameras: list = field(default_factory=list)
    seed: int = 0
    background: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    supersample: int = 2
    extent: float = 1.0

    def __post_init__(self):
        if len(self.cameras) < 2:
            raise InvalidParameterError("a synthetic scene needs at least two camera poses")

    def to_dict(self) -> dict:
        return {
            "rects": [asdict(r) for r in self.rects],
            "movers": [asdict(m) for m in self.movers],
            "cameras": [c.to_dict() for c in self.cameras],
            "heldout_cameras": [c.to_dict() for c in self.heldout_cameras],
            "seed": self.seed,
            "background": list(self.background),
            "supersample": self.supersample,
            "extent": self.extent,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticScene":
        return cls(
            rects=[TexturedRect(**r) for r in data["rects"]],
            movers=[Mover(**m) for m in data.get("movers", [])],
            cameras=[Camera.from_dict(c) for c in data["cameras"]],
            heldout_cameras=[Camera.from_dict(c) for c in data.get("heldout_cameras", [])],
            seed=int(data.get("seed", 0)),
            background=list(data.get("background", [0.0, 0.0, 0.0])),
            supersample=int(data.get("supersample", 2)),
            extent=float(data.get("extent", 1.0)),
        )


@dataclass
class _Hits:
    t: np.ndarray
    color: np.ndarray
    normal: np.ndarray
    mover: np.ndarray  # bool, nearest hit is a mover


def _camera_rays(cam: Camera, offsets):
    vv, uu = np.mgrid[0 : cam.height, 0 : cam.width].astype(np.float64)
    dirs = []
    for du, dv in offsets:
        d = np.stack([(uu + du - cam.cx) / cam.fx, (vv + dv - cam.cy) / cam.fy, np.ones_like(uu)], axis=-1)
        dirs.append(d.reshape(-1, 3) @ cam.rotation)  # camera -> world, unnormalized (z_cam = 1)
    return cam.center, np.stack(dirs)  # (S, P, 3)


def _trace(scene: SyntheticScene, origin, dirs, mover_positions) -> _Hits:
    n = dirs.shape[0]
    best_t = np.full(n, np.inf)
    color = np.tile(np.asarray(scene.background, dtype=np.float64), (n, 1))
    normal = np.zeros((n, 3))
    mover = np.zeros(n, dtype=bool)
    for rect in scene.rects:
        nrm = rect.normal
        denom = dirs @ nrm
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((np.asarray(rect.origin) - origin) @ nrm) / denom
        hit = origin + t[:, None] * dirs - np.asarray(rect.origin)
        eu, ev = np.asarray(rect.edge_u), np.asarray(rect.edge_v)
        s = hit @ eu / (eu @ eu)
        tt = hit @ ev / (ev @ ev)
        ok = (np.abs(denom) > 1e-12) & (t > 1e-9) & (s >= 0) & (s <= 1) & (tt >= 0) & (tt <= 1) & (t < best_t)
        if ok.any():
            best_t[ok] = t[ok]
            color[ok] = rect.texture(s[ok], tt[ok], scene.seed)
            normal[ok] = nrm
            mover[ok] = False
    for m, pos in mover_positions:
        oc = origin - pos
        a = np.einsum("ij,ij->i", dirs, dirs)
        b = 2.0 * dirs @ oc
        c = oc @ oc - m.radius**2
        disc = b * b - 4 * a * c
        with np.errstate(invalid="ignore"):
            t = (-b - np.sqrt(disc)) / (2 * a)
        ok = (disc >= 0) & (t > 1e-9) & (t < best_t)
        if ok.any():
            best_t[ok] = t[ok]
            p = origin + t[ok, None] * dirs[ok] - pos
            nn = p / m.radius
            stripes = 0.75 + 0.25 * np.sign(np.sin(12.0 * nn[:, 2]))
            color[ok] = np.clip(np.asarray(m.color)[None] * stripes[:, None], 0, 1)
            normal[ok] = nn
            mover[ok] = True
    return _Hits(best_t, color, normal, mover)


def _offsets(k: int):
    if k <= 1:
        return [(0.0, 0.0)]
    g = (np.arange(k) + 0.5) / k - 0.5
    return [(du, dv) for dv in g for du in g]


def render_view(scene: SyntheticScene, cam: Camera, mover_positions=()):
    """Ray-cast one view. Returns (color, depth, camera-frame normal, mover coverage)."""
    origin, dirs = _camera_rays(cam, _offsets(scene.supersample))
    h, w = cam.height, cam.width
    colors = []
    covered = np.zeros(h * w, dtype=bool)
    for sub in dirs:
        hits = _trace(scene, origin, sub, mover_positions)
        colors.append(hits.color)
        covered |= hits.mover
    color = np.mean(colors, axis=0).reshape(h, w, 3)
    _, center_dirs = _camera_rays(cam, [(0.0, 0.0)])
    static = _trace(scene, origin, center_dirs[0], ())
    depth = np.where(np.isfinite(static.t), static.t, 0.0).reshape(h, w)
    n_cam = static.normal @ cam.rotation.T
    flip = np.einsum("ij,ij->i", n_cam, center_dirs[0] @ cam.rotation.T) > 0
    n_cam[flip] *= -1
    return color, depth, n_cam.reshape(h, w, 3), covered.reshape(h, w)


def _check_camera(scene: SyntheticScene, cam: Camera):
    c = cam.center
    for rect in scene.rects:
        if abs((c - np.asarray(rect.origin)) @ rect.normal) < 1e-9:
            raise InvalidParameterError("camera center lies on scene geometry")
    for m in scene.movers:
        for f in range(m.first_frame, m.last_frame + 1):
            p = m.position(f)
            if p is not None and np.linalg.norm(c - p) <= m.radius:
                raise InvalidParameterError("camera center lies inside a mover")


def generate(scene: SyntheticScene) -> Dataset:
    """Render frames, exact masks, mover-free frames and true depth/normal maps."""
    for cam in list(scene.cameras) + list(scene.heldout_cameras):
        _check_camera(scene, cam)
    frames = []
    ds = Dataset(frames=frames, scene=scene.to_dict())
    for i, cam in enumerate(scene.cameras):
        name = f"frame_{i:03d}"
        movers = [(m, m.position(i)) for m in scene.movers if m.position(i) is not None]
        clean, depth, normal, _ = render_view(scene, cam)
        if movers:
            image, _, _, covered = render_view(scene, cam, movers)
        else:
            image, covered = clean.copy(), np.zeros(depth.shape, dtype=bool)
        frames.append(Frame(name=name, image=image, camera=cam, mask=(~covered).astype(np.uint8), camera_id=name))
        ds.clean_images[name] = clean
        ds.depths[name] = depth
        ds.normals[name] = normal
    all_positions = [
        (m, m.position(f)) for m in scene.movers for f in range(len(scene.cameras)) if m.position(f) is not None
    ]
    for j, cam in enumerate(scene.heldout_cameras):
        name = f"test_{j:03d}"
        clean, depth, normal, _ = render_view(scene, cam)
        region = np.zeros(depth.shape, dtype=bool)
        for item in all_positions:
            region |= render_view(scene, cam, [item])[3]
        ds.test_frames.append(Frame(name=name, image=clean, camera=cam, mask=None, camera_id=name))
        ds.clean_images[name] = clean
        ds.depths[name] = depth
        ds.normals[name] = normal
        ds.regions[name] = region.astype(np.uint8)
    return ds


def ring_cameras(n, radius, height, target, width, height_px, fov_deg, angle0, angle1):
    fx = (width / 2.0) / np.tan(np.radians(fov_deg) / 2.0)
    cams = []
    for ang in np.linspace(angle0, angle1, n):
        eye = np.array([radius * np.cos(ang), radius * np.sin(ang), height])
        cams.append(Camera.look_at(eye, target, width=width, height=height_px, fx=fx))
    return cams


def standard_scene(
    n_frames: int = 24,
    mover_frames: int = 12,
    width: int = 64,
    height: int = 48,
    n_heldout: int = 4,
    seed: int = 0,
    with_mover: bool = True,
) -> SyntheticScene:
    """Textured box on a textured ground plane, one sphere crossing in front of it."""
    ground = TexturedRect(
        origin=[-0.6, -0.6, 0.0], edge_u=[1.2, 0.0, 0.0], edge_v=[0.0, 1.2, 0.0],
        base_color=[0.55, 0.6, 0.45], checks=8, noise_res=10, noise_amp=0.3, noise_seed=100,
    )
    rects = [ground] + box_faces(
        [0.05, 0.1, 0.15], (0.18, 0.18, 0.15),
        colors=[(0.9, 0.7, 0.3), (0.3, 0.5, 0.9), (0.8, 0.35, 0.35), (0.4, 0.8, 0.6), (0.85, 0.85, 0.8)],
        seed=200,
    )
    a0, a1 = np.radians(-140.0), np.radians(-40.0)
    target = [0.0, 0.0, 0.1]
    cams = ring_cameras(n_frames, 1.25, 0.85, target, width, height, 55.0, a0, a1)
    step = (a1 - a0) / max(n_frames - 1, 1)
    # held-out poses sit halfway between training poses, spread over the arc
    picks = np.linspace(1, n_frames - 3, n_heldout).round().astype(int) if n_heldout else []
    heldout = [
        ring_cameras(2, 1.25, 0.85, target, width, height, 55.0, a0 + (k + 0.5) * step, a0 + (k + 0.5) * step)[0]
        for k in picks
    ]
    movers = []
    if with_mover and mover_frames > 0:
        first = (n_frames - mover_frames) // 2
        movers.append(
            Mover(
                radius=0.15, color=[0.95, 0.1, 0.8], first_frame=first, last_frame=first + mover_frames - 1,
                start=[-0.3, -0.32, 0.15], end=[0.3, -0.32, 0.15],
            )
        )
    return SyntheticScene(rects=rects, cameras=cams, movers=movers, heldout_cameras=heldout, seed=seed)


def planar_scene(n_frames: int = 5, width: int = 64, height: int = 48, tilt_deg: float = 20.0, seed: int = 0):
    """A single textured plane, slightly tilted, seen by a short camera baseline."""
    tilt = np.radians(tilt_deg)
    eu = np.array([1.6, 0.0, 0.0])
    ev = np.array([0.0, 1.2 * np.cos(tilt), 1.2 * np.sin(tilt)])
    origin = -0.5 * eu - 0.5 * ev
    plane = TexturedRect(
        origin=origin.tolist(), edge_u=eu.tolist(), edge_v=ev.tolist(),
        base_color=[0.7, 0.6, 0.5], checks=10, noise_res=12, noise_amp=0.35, noise_seed=7,
    )
    fx = (width / 2.0) / np.tan(np.radians(50.0) / 2.0)
    cams = []
    for x in np.linspace(-0.25, 0.25, n_frames):
        eye = np.array([x, -0.35, 1.6])
        cams.append(Camera.look_at(eye, [x * 0.5, 0.0, 0.0], up=(0.0, 1.0, 0.0), width=width, height=height, fx=fx))
    return SyntheticScene(rects=[plane], cameras=cams, seed=seed)


def plane_cloud(rect: TexturedRect, spacing: float, opacity: float = 0.9, thin: float = 0.002, seed: int = 0,
                sh_degree: int = 3):
    """Flattened Gaussians on a regular grid covering one rectangle."""
    from ..gaussians import GaussianCloud, matrix_to_quaternion

    eu, ev = np.asarray(rect.edge_u), np.asarray(rect.edge_v)
    nu = max(int(round(np.linalg.norm(eu) / spacing)), 1)
    nv = max(int(round(np.linalg.norm(ev) / spacing)), 1)
    s, t = np.meshgrid((np.arange(nu) + 0.5) / nu, (np.arange(nv) + 0.5) / nv)
    s, t = s.ravel(), t.ravel()
    frame = np.stack([eu / np.linalg.norm(eu), ev / np.linalg.norm(ev), rect.normal], axis=1)
    q = np.tile(matrix_to_quaternion(frame), (len(s), 1))
    scales = np.tile([0.7 * spacing, 0.7 * spacing, thin], (len(s), 1))
    cloud = GaussianCloud.from_points(rect.point(s, t), rect.texture(s, t, seed), scales, opacities=opacity,
                                      sh_degree=sh_degree, rotations=q)
    return cloud, np.stack([s, t], axis=1)


@dataclass(eq=False)
class DecimatedPlane:
    scene: SyntheticScene
    dataset: Dataset
    full: object  # GaussianCloud
    decimated: object
    hole_centers: np.ndarray  # (k, 2) in rectangle (s, t) coordinates
    hole_radius: float  # world units
    removed_fraction: float

    def hole_mask(self, cam: Camera, depth) -> np.ndarray:
        """Pixels whose true surface point falls inside a removed patch."""
        rect = self.scene.rects[0]
        h, w = depth.shape
        vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
        hit = depth > 0
        pts = cam.backproject(np.stack([uu[hit], vv[hit]], axis=1), depth[hit]) - np.asarray(rect.origin)
        eu, ev = np.asarray(rect.edge_u), np.asarray(rect.edge_v)
        st = np.stack([pts @ eu / (eu @ eu), pts @ ev / (ev @ ev)], axis=1)
        scale = np.array([np.linalg.norm(eu), np.linalg.norm(ev)])
        dist = np.linalg.norm((st[:, None] - self.hole_centers[None]) * scale, axis=-1).min(axis=1)
        out = np.zeros((h, w), dtype=bool)
        out[hit] = dist <= self.hole_radius
        return out


def decimated_plane(fraction: float = 0.3, hole_radius: float = 0.06, spacing: float = 0.02, seed: int = 0,
                    n_frames: int = 5, width: int = 64, height: int = 48) -> DecimatedPlane:
    """Planar scene fully covered by Gaussians, minus round patches covering ``fraction`` of them."""
    scene = planar_scene(n_frames=n_frames, width=width, height=height, seed=seed)
    ds = generate(scene)
    rect = scene.rects[0]
    full, st = plane_cloud(rect, spacing, seed=seed)
    scale = np.array([np.linalg.norm(rect.edge_u), np.linalg.norm(rect.edge_v)])
    rng = np.random.default_rng(seed)
    margin = hole_radius / scale + 0.08
    removed = np.zeros(len(full), dtype=bool)
    centers = []
    tries = 0
    while removed.mean() < fraction and tries < 10000:
        tries += 1
        c = rng.uniform(margin, 1 - margin)
        if centers and np.min(np.linalg.norm((np.array(centers) - c) * scale, axis=1)) < 2.05 * hole_radius:
            continue
        centers.append(c)
        removed |= np.linalg.norm((st - c) * scale, axis=1) <= hole_radius
    ds.initial_cloud = full.take(np.flatnonzero(~removed))
    return DecimatedPlane(scene, ds, full, ds.initial_cloud, np.array(centers), hole_radius, float(removed.mean()))
