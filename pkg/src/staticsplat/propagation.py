"""Plane-hypothesis propagation: fill under-modeled regions with new Gaussians.

Each pixel carries a local plane ``(d, n)`` in its camera frame with
``n . X = d`` for points X on the plane, so a pixel at depth ``delta`` has
``d = delta * n . K^-1 p``. Planes are copied between neighboring pixels when
the copy improves a homography-warped SSIM score against nearby views, then
checked for cross-view depth consistency, and finally back-projected into new
Gaussians wherever the rendered depth disagrees.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .exceptions import DegeneratePlaneError, InvalidDepthError, InvalidParameterError
from .gaussians import Camera, GaussianCloud, logit, matrix_to_quaternion, relative_transform
from .losses import SSIM_A1, SSIM_A2
from .rasterizer import DEFAULT_SETTINGS, render
from . import sh as _sh

log = logging.getLogger(__name__)

SPAWN_OPACITY = 0.1
LOW_TEXTURE_VAR = 1e-6
NO_MATCH = -2.0
DEDUP_TOL = 1e-9
LUMA = np.array([0.299, 0.587, 0.114])

_OFFSETS_8 = np.array([(-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (1, -1), (-1, 1), (1, 1)], dtype=np.int64)


@dataclass(frozen=True)
class PlaneParam:
    d: float
    n: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.n, dtype=np.float64).reshape(3)
        object.__setattr__(self, "n", n)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise InvalidParameterError(f"plane normal must be unit length, got |n| = {np.linalg.norm(n)}")
        if not np.isfinite(self.d):
            raise InvalidParameterError("plane distance must be finite")
        if abs(self.d) <= 1e-9:
            raise DegeneratePlaneError("plane passes through the camera center")

    def same_as(self, other: "PlaneParam", tol: float = DEDUP_TOL) -> bool:
        return abs(self.d - other.d) <= tol and bool(np.all(np.abs(self.n - other.n) <= tol))


@dataclass(frozen=True)
class PropagationConfig:
    patch_size: int = 11
    neighbor_count: int = 8
    sigma_rel: float = 0.8
    depth_spawn_threshold: float = 0.1
    min_consistent_views: int = 1
    sweeps: int = 3
    source_views: int = 3
    min_inside_fraction: float = 0.5
    alpha_threshold: float = 0.5  # rendered coverage needed to seed a plane
    respect_masks: bool = True
    thin_ratio: float = 0.1  # spawned thickness relative to the in-plane footprint
    a1: float = SSIM_A1
    a2: float = SSIM_A2
    debug_dir: str | None = None

    def __post_init__(self):
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise InvalidParameterError("patch_size must be a positive odd integer")
        if self.neighbor_count not in (4, 8):
            raise InvalidParameterError("neighbor_count must be 4 or 8")
        if not self.sigma_rel > 0:
            raise InvalidParameterError("sigma_rel must be > 0")
        if self.min_consistent_views < 1:
            raise InvalidParameterError("min_consistent_views must be >= 1")
        if self.sweeps < 0 or self.source_views < 1:
            raise InvalidParameterError("sweeps must be >= 0 and source_views >= 1")

    def check_image(self, height: int, width: int):
        if self.patch_size > min(height, width):
            raise InvalidParameterError(f"patch {self.patch_size} does not fit a {width}x{height} image")


@dataclass(eq=False)
class PlaneField:
    d: np.ndarray  # (H, W)
    n: np.ndarray  # (H, W, 3)
    valid: np.ndarray  # (H, W) bool

    def plane(self, u: int, v: int) -> PlaneParam | None:
        if not self.valid[v, u]:
            return None
        return PlaneParam(float(self.d[v, u]), self.n[v, u])


@dataclass(eq=False)
class PropagationResult:
    depth: np.ndarray
    normal: np.ndarray
    validity: np.ndarray
    spawned: GaussianCloud | None = None
    score: np.ndarray | None = None
    confident: np.ndarray | None = None


@dataclass(eq=False)
class StageResult:
    cloud: GaussianCloud
    views: dict = field(default_factory=dict)  # frame name -> PropagationResult
    references: dict = field(default_factory=dict)  # frame name -> (normals, validity) for the normal loss

    @property
    def n_spawned(self) -> int:
        return sum(len(r.spawned) for r in self.views.values() if r.spawned is not None)


def _ray(p, cam: Camera) -> np.ndarray:
    return cam.K_inv @ np.array([float(p[0]), float(p[1]), 1.0])


def pixel_plane(p, depth: float, n, cam: Camera) -> PlaneParam:
    if not depth > 0:
        raise InvalidDepthError(f"depth must be > 0, got {depth}")
    n = np.asarray(n, dtype=np.float64)
    return PlaneParam(float(depth * (n @ _ray(p, cam))), n)


def plane_depth(p, plane: PlaneParam, cam: Camera) -> float:
    """Depth of pixel ``p``'s ray where it meets ``plane``."""
    denom = plane.n @ _ray(p, cam)
    if abs(denom) < 1e-12:
        raise DegeneratePlaneError("pixel ray is parallel to the plane")
    return float(plane.d / denom)


def plane_field(depth, normals, cam: Camera, valid=None) -> PlaneField:
    """Per-pixel planes from depth and camera-frame normal maps."""
    depth = np.asarray(depth, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    h, w = depth.shape
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    rays = np.stack([(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy, np.ones_like(uu)], axis=-1)
    length = np.linalg.norm(normals, axis=-1)
    n = np.where(length[..., None] > 0, normals / np.maximum(length, 1e-300)[..., None], 0.0)
    d = depth * np.sum(n * rays, axis=-1)
    ok = (depth > 0) & (length > 0) & (np.abs(d) > 1e-9) & np.all(np.isfinite(n), axis=-1)
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)
    return PlaneField(np.where(ok, d, 0.0), np.where(ok[..., None], n, 0.0), ok)


def candidate_planes(p, current: PlaneField, cfg: PropagationConfig = PropagationConfig()) -> list:
    """The plane at ``p`` followed by its neighbors' planes, duplicates removed."""
    u, v = int(p[0]), int(p[1])
    h, w = current.valid.shape
    offsets = _OFFSETS_8[: cfg.neighbor_count]
    out: list = []
    for du, dv in [(0, 0)] + [tuple(o) for o in offsets]:
        x, y = u + du, v + dv
        if 0 <= x < w and 0 <= y < h:
            plane = current.plane(x, y)
            if plane is not None and not any(plane.same_as(c) for c in out):
                out.append(plane)
    return out


def plane_homography(plane: PlaneParam, ref: Camera, neighbor: Camera) -> np.ndarray:
    """3x3 map from reference to neighbor pixels for points on ``plane``."""
    if abs(plane.d) <= 1e-9:
        raise DegeneratePlaneError("plane passes through the camera center")
    w_rel, t_rel = relative_transform(ref, neighbor)
    h = neighbor.K @ (w_rel + np.outer(t_rel, plane.n) / plane.d) @ ref.K_inv
    return h / h[2, 2] if abs(h[2, 2]) > 1e-12 else h


def to_gray(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return image if image.ndim == 2 else image @ LUMA


def _warp_terms(ref: Camera, neighbors: list) -> tuple[np.ndarray, np.ndarray]:
    """Per neighbor A = K_n W K_r^-1 and b = K_n t so that H p = A p + b (n . K_r^-1 p) / d."""
    a = np.empty((len(neighbors), 3, 3))
    b = np.empty((len(neighbors), 3))
    for i, cam in enumerate(neighbors):
        w_rel, t_rel = relative_transform(ref, cam)
        a[i] = cam.K @ w_rel @ ref.K_inv
        b[i] = cam.K @ t_rel
    return a, b


@njit(cache=True)
def _bilinear(img, x, y):
    h, w = img.shape
    x0 = int(np.floor(x))
    y0 = int(np.floor(y))
    x0 = min(max(x0, 0), w - 2)
    y0 = min(max(y0, 0), h - 2)
    fx = x - x0
    fy = y - y0
    return (
        img[y0, x0] * (1 - fx) * (1 - fy)
        + img[y0, x0 + 1] * fx * (1 - fy)
        + img[y0 + 1, x0] * (1 - fx) * fy
        + img[y0 + 1, x0 + 1] * fx * fy
    )


@njit(cache=True)
def _score(u, v, d, n0, n1, n2, ref, nbrs, a, b, kinv, half, a1, a2, min_frac):
    """Mean single-window SSIM of the plane-warped patch over usable neighbors."""
    h, w = ref.shape
    c0 = (kinv[0, 0] * n0 + kinv[1, 0] * n1 + kinv[2, 0] * n2) / d
    c1 = (kinv[0, 1] * n0 + kinv[1, 1] * n1 + kinv[2, 1] * n2) / d
    c2 = (kinv[0, 2] * n0 + kinv[1, 2] * n1 + kinv[2, 2] * n2) / d
    if c0 * u + c1 * v + c2 <= 0.0:  # plane behind the camera at this pixel
        return -2.0
    total = 0.0
    usable = 0
    for k in range(nbrs.shape[0]):
        img = nbrs[k]
        hn, wn = img.shape
        sa = 0.0
        sb = 0.0
        saa = 0.0
        sbb = 0.0
        sab = 0.0
        cnt = 0
        possible = 0
        for dy in range(-half, half + 1):
            y = v + dy
            if y < 0 or y >= h:
                continue
            for dx in range(-half, half + 1):
                x = u + dx
                if x < 0 or x >= w:
                    continue
                possible += 1
                s = c0 * x + c1 * y + c2
                hx = a[k, 0, 0] * x + a[k, 0, 1] * y + a[k, 0, 2] + b[k, 0] * s
                hy = a[k, 1, 0] * x + a[k, 1, 1] * y + a[k, 1, 2] + b[k, 1] * s
                hz = a[k, 2, 0] * x + a[k, 2, 1] * y + a[k, 2, 2] + b[k, 2] * s
                if hz <= 1e-12:
                    continue
                xs = hx / hz
                ys = hy / hz
                if xs < 0.0 or ys < 0.0 or xs > wn - 1 or ys > hn - 1:
                    continue
                pa = ref[y, x]
                pb = _bilinear(img, xs, ys)
                sa += pa
                sb += pb
                saa += pa * pa
                sbb += pb * pb
                sab += pa * pb
                cnt += 1
        if cnt == 0 or cnt < min_frac * possible:
            continue
        ma = sa / cnt
        mb = sb / cnt
        va = max(saa / cnt - ma * ma, 0.0)
        vb = max(sbb / cnt - mb * mb, 0.0)
        cab = sab / cnt - ma * mb
        total += ((2 * ma * mb + a1) * (2 * cab + a2)) / ((ma * ma + mb * mb + a1) * (va + vb + a2))
        usable += 1
    if usable == 0:
        return -2.0
    return total / usable


@njit(cache=True)
def _patch_variance(ref, half):
    h, w = ref.shape
    out = np.zeros((h, w))
    for v in range(h):
        for u in range(w):
            s = 0.0
            ss = 0.0
            c = 0
            for y in range(max(0, v - half), min(h, v + half + 1)):
                for x in range(max(0, u - half), min(w, u + half + 1)):
                    s += ref[y, x]
                    ss += ref[y, x] * ref[y, x]
                    c += 1
            m = s / c
            out[v, u] = max(ss / c - m * m, 0.0)
    return out


@njit(cache=True)
def _sweeps(d, n, valid, score, ref, nbrs, a, b, kinv, half, offsets, sweeps, a1, a2, min_frac):
    h, w = d.shape
    for v in range(h):
        for u in range(w):
            if valid[v, u]:
                score[v, u] = _score(u, v, d[v, u], n[v, u, 0], n[v, u, 1], n[v, u, 2], ref, nbrs, a, b, kinv,
                                     half, a1, a2, min_frac)
            else:
                score[v, u] = -np.inf
    for _ in range(sweeps):
        for color in range(2):
            # planes read during one half-sweep come from a fixed snapshot
            d0 = d.copy()
            n0 = n.copy()
            valid0 = valid.copy()
            for v in range(h):
                for u in range(w):
                    if (u + v) % 2 != color:
                        continue
                    best = score[v, u]
                    bd = d0[v, u]
                    bn0 = n0[v, u, 0]
                    bn1 = n0[v, u, 1]
                    bn2 = n0[v, u, 2]
                    found = valid0[v, u]
                    for k in range(offsets.shape[0]):
                        x = u + offsets[k, 0]
                        y = v + offsets[k, 1]
                        if x < 0 or y < 0 or x >= w or y >= h or not valid0[y, x]:
                            continue
                        cd = d0[y, x]
                        if found and abs(cd - bd) <= 1e-9 and abs(n0[y, x, 0] - bn0) <= 1e-9 and abs(
                            n0[y, x, 1] - bn1
                        ) <= 1e-9 and abs(n0[y, x, 2] - bn2) <= 1e-9:
                            continue
                        sc = _score(u, v, cd, n0[y, x, 0], n0[y, x, 1], n0[y, x, 2], ref, nbrs, a, b, kinv,
                                    half, a1, a2, min_frac)
                        if sc > best:
                            best = sc
                            bd = cd
                            bn0 = n0[y, x, 0]
                            bn1 = n0[y, x, 1]
                            bn2 = n0[y, x, 2]
                            found = True
                    if found and best > -2.0:
                        d[v, u] = bd
                        n[v, u, 0] = bn0
                        n[v, u, 1] = bn1
                        n[v, u, 2] = bn2
                        valid[v, u] = True
                        score[v, u] = best


def _warp_inputs(ref_image, ref_cam, neighbors, cfg):
    ref = np.ascontiguousarray(to_gray(ref_image))
    imgs = [to_gray(img) for img, _ in neighbors]
    if len({im.shape for im in imgs}) > 1:
        raise InvalidParameterError("neighbor images must share one resolution")
    nbrs = np.ascontiguousarray(np.stack(imgs)) if imgs else np.zeros((0,) + ref.shape)
    a, b = _warp_terms(ref_cam, [cam for _, cam in neighbors])
    return ref, nbrs, a, b


def patch_match(p, candidates, ref_image, ref_cam: Camera, neighbors, cfg: PropagationConfig = PropagationConfig()):
    """Best candidate plane by mean warped-patch SSIM over ``neighbors``.

    ``neighbors`` is a list of ``(image, camera)``. Returns
    ``(plane, score, confident)``; ``plane`` is None when every candidate
    warps outside every neighbor. Ties keep the earliest candidate.
    """
    if len(neighbors) == 0:
        raise InvalidParameterError("patch matching needs at least one neighbor image")
    ref, nbrs, a, b = _warp_inputs(ref_image, ref_cam, neighbors, cfg)
    half = cfg.patch_size // 2
    u, v = int(p[0]), int(p[1])
    best, best_score = None, NO_MATCH
    for plane in candidates:
        sc = _score(u, v, plane.d, plane.n[0], plane.n[1], plane.n[2], ref, nbrs, a, b, ref_cam.K_inv, half,
                    cfg.a1, cfg.a2, cfg.min_inside_fraction)
        if sc > best_score:
            best, best_score = plane, sc
    confident = _local_variance(ref, u, v, half) >= LOW_TEXTURE_VAR
    return best, (float(best_score) if best is not None else NO_MATCH), confident


def _local_variance(ref, u, v, half) -> float:
    patch = ref[max(0, v - half) : v + half + 1, max(0, u - half) : u + half + 1]
    return float(patch.var())


def propagate_view(seed: PlaneField, ref_image, ref_cam: Camera, neighbors, cfg: PropagationConfig):
    """Run the checkerboard sweeps for one view. Returns (field, score, confident)."""
    cfg.check_image(ref_cam.height, ref_cam.width)
    ref, nbrs, a, b = _warp_inputs(ref_image, ref_cam, neighbors, cfg)
    d, n, valid = seed.d.copy(), seed.n.copy(), seed.valid.copy()
    score = np.empty(d.shape)
    half = cfg.patch_size // 2
    _sweeps(d, n, valid, score, ref, nbrs, a, b, ref_cam.K_inv, half, _OFFSETS_8[: cfg.neighbor_count],
            cfg.sweeps, cfg.a1, cfg.a2, cfg.min_inside_fraction)
    valid &= score > NO_MATCH
    confident = _patch_variance(ref, half) >= LOW_TEXTURE_VAR
    return PlaneField(np.where(valid, d, 0.0), np.where(valid[..., None], n, 0.0), valid), score, confident


def field_depth(planes: PlaneField, cam: Camera) -> np.ndarray:
    h, w = planes.d.shape
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    rays = np.stack([(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy, np.ones_like(uu)], axis=-1)
    denom = np.sum(planes.n * rays, axis=-1)
    ok = planes.valid & (np.abs(denom) > 1e-12)
    depth = np.where(ok, planes.d / np.where(ok, denom, 1.0), 0.0)
    return np.where(depth > 0, depth, 0.0)


def geometric_filter(depths, cameras, cfg: PropagationConfig = PropagationConfig(), neighbors=None) -> list:
    """Per-view validity: depth agrees with enough other views after reprojection.

    ``neighbors[i]`` lists the views checked against view ``i`` (default: all
    others). The relative error is measured against the neighbor's depth.
    """
    if len(depths) < 2:
        raise InvalidParameterError("the geometric filter needs at least two views")
    out = []
    for i, (depth, cam) in enumerate(zip(depths, cameras)):
        depth = np.asarray(depth, dtype=np.float64)
        h, w = depth.shape
        vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
        has = depth > 0
        pts = cam.backproject(np.stack([uu[has], vv[has]], axis=1), depth[has])
        votes = np.zeros(int(has.sum()), dtype=np.int64)
        others = neighbors[i] if neighbors is not None else [j for j in range(len(depths)) if j != i]
        for j in others:
            nd = np.asarray(depths[j], dtype=np.float64)
            uv, z = cameras[j].project(pts)
            col = np.rint(uv[:, 0]).astype(np.int64)
            row = np.rint(uv[:, 1]).astype(np.int64)
            inside = (z > 0) & (col >= 0) & (row >= 0) & (col < nd.shape[1]) & (row < nd.shape[0])
            target = np.zeros(len(z))
            target[inside] = nd[row[inside], col[inside]]
            ok = inside & (target > 0)
            rel = np.full(len(z), np.inf)
            rel[ok] = np.abs(z[ok] - target[ok]) / target[ok]
            votes += rel <= cfg.sigma_rel
        valid = np.zeros((h, w), dtype=bool)
        valid[has] = votes >= cfg.min_consistent_views
        out.append(valid)
    return out


def _frame_from_normal(n) -> np.ndarray:
    """Rotations whose third column is ``n`` (rows of n are unit vectors)."""
    n = np.atleast_2d(n)
    helper = np.where(np.abs(n[:, :1]) < 0.9, np.array([[1.0, 0.0, 0.0]]), np.array([[0.0, 1.0, 0.0]]))
    e1 = np.cross(helper, n)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(n, e1)
    return np.stack([e1, e2, n], axis=2)


def spawn_gaussians(propagated: PropagationResult, rendered_depth, cfg: PropagationConfig, cam: Camera, image,
                    iteration: int = 0, sh_degree: int = 3, allowed=None) -> GaussianCloud:
    """New Gaussians at valid pixels whose propagated depth departs from the render.

    Position is the back-projection at the propagated depth, the thin axis
    follows the propagated normal, the in-plane scale is one pixel footprint.
    """
    depth = np.asarray(propagated.depth, dtype=np.float64)
    rendered_depth = np.asarray(rendered_depth, dtype=np.float64)
    pick = np.asarray(propagated.validity, dtype=bool) & (depth > 0)
    if propagated.confident is not None:
        pick &= propagated.confident
    if allowed is not None:
        pick &= np.asarray(allowed, dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.abs(depth - rendered_depth) / depth
    pick &= rel > cfg.depth_spawn_threshold
    rows, cols = np.nonzero(pick)
    if len(rows) == 0:
        return GaussianCloud.empty(sh_degree)
    z = depth[rows, cols]
    positions = cam.backproject(np.stack([cols, rows], axis=1).astype(np.float64), z)
    n_world = propagated.normal[rows, cols] @ cam.rotation  # camera -> world
    n_world /= np.linalg.norm(n_world, axis=1, keepdims=True)
    rot = matrix_to_quaternion(_frame_from_normal(n_world))
    footprint = z / np.sqrt(cam.fx * cam.fy)
    scales = np.stack([footprint, footprint, footprint * cfg.thin_ratio], axis=1)
    colors = np.asarray(image, dtype=np.float64)[rows, cols]
    sh = np.zeros((len(rows), _sh.num_coeffs(sh_degree), 3))
    sh[:, 0] = _sh.rgb_to_dc(colors)
    return GaussianCloud(
        positions=positions,
        rotations=rot.reshape(-1, 4),
        log_scales=np.log(scales),
        opacity_logits=np.full(len(rows), float(logit(SPAWN_OPACITY))),
        sh=sh,
        sh_degree=sh_degree,
        tags=np.full(len(rows), iteration, dtype=np.int64),
    )


def nearest_views(cameras, k: int) -> list:
    centers = np.array([c.center for c in cameras])
    dist = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
    out = []
    for i in range(len(cameras)):
        order = [j for j in np.argsort(dist[i], kind="stable") if j != i]
        out.append(order[:k])
    return out


def propagate_stage(cloud: GaussianCloud, dataset, cfg: PropagationConfig = PropagationConfig(),
                    background=(0.0, 0.0, 0.0), iteration: int = 0, settings=DEFAULT_SETTINGS) -> StageResult:
    """One propagation pass over every training view; spawned points are appended."""
    frames = list(dataset.frames)
    if len(frames) < 2:
        log.warning("propagation needs at least two views; stage skipped")
        return StageResult(cloud=cloud)
    cams = [f.camera for f in frames]
    groups = nearest_views(cams, cfg.source_views)
    renders, fields_, scores, confident = [], [], [], []
    for i, f in enumerate(frames):
        out = render(cloud, f.camera, background, settings)
        renders.append(out)
        seed = plane_field(out.depth, out.normal, f.camera, valid=out.alpha >= cfg.alpha_threshold)
        neighbors = [(frames[j].image, cams[j]) for j in groups[i]]
        planes, score, conf = propagate_view(seed, f.image, f.camera, neighbors, cfg)
        fields_.append(planes)
        scores.append(score)
        confident.append(conf)
    depths = [field_depth(p, c) for p, c in zip(fields_, cams)]
    validity = geometric_filter(depths, cams, cfg, neighbors=groups)

    result = StageResult(cloud=cloud)
    spawned = []
    for i, f in enumerate(frames):
        valid = validity[i] & fields_[i].valid
        pr = PropagationResult(
            depth=np.where(valid, depths[i], 0.0),
            normal=np.where(valid[..., None], fields_[i].n, 0.0),
            validity=valid,
            score=scores[i],
            confident=confident[i],
        )
        allowed = f.mask.astype(bool) if (cfg.respect_masks and f.mask is not None) else None
        # thinly covered pixels count as having no rendered surface at all
        covered = np.where(renders[i].alpha >= cfg.alpha_threshold, renders[i].depth, 0.0)
        pr.spawned = spawn_gaussians(pr, covered, cfg, f.camera, f.image, iteration, cloud.sh_degree,
                                     allowed=allowed)
        spawned.append(pr.spawned)
        result.views[f.name] = pr
        ref_valid = valid & confident[i]
        if allowed is not None:
            ref_valid &= allowed
        result.references[f.name] = (pr.normal, ref_valid.astype(np.float64))
        if cfg.debug_dir:
            from .io import dump_propagation_debug

            dump_propagation_debug(cfg.debug_dir, iteration, f.name, pr)
    new = cloud
    for s in spawned:
        if len(s):
            new = new.concat(s)
    result.cloud = new
    log.info("propagation at iteration %d spawned %d Gaussians", iteration, len(new) - len(cloud))
    return result
