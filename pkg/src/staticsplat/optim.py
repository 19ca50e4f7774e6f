"""Adam updates, adaptive densification, pruning and the training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .dataset import Dataset
from .exceptions import DatasetError, InvalidParameterError
from .gaussians import GaussianCloud, quaternion_to_matrix
from .losses import LossTerms, LossWeights, total_loss
from .masking import MASK_MODES, apply_color_mask, dilate_object
from .rasterizer import DEFAULT_SETTINGS, RasterSettings, render, render_backward
from . import sh as _sh

log = logging.getLogger(__name__)

GROUPS = ("positions", "rotations", "log_scales", "opacity_logits", "sh")
SPLIT_CHILDREN = 2
SPLIT_SCALE_DIVISOR = 1.6
DEFAULT_TRIGGERS = (3000, 6000, 9000)
LOG_COLUMNS = ("iteration", "total", "l1", "dssim", "flatten", "sparse", "normal", "n_gaussians")


@dataclass(frozen=True)
class LearningRates:
    position_init: float = 1.6e-4  # multiplied by the scene extent
    position_final: float = 1.6e-6
    position_decay_steps: int = 30000
    rotation: float = 1e-3
    scale: float = 5e-3
    opacity: float = 0.05
    color: float = 2.5e-3  # DC coefficients; higher orders use color / 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15

    def position_lr(self, step: int, extent: float = 1.0) -> float:
        if self.position_decay_steps <= 0:
            return self.position_init * extent
        f = min(max(step / self.position_decay_steps, 0.0), 1.0)
        if self.position_init <= 0 or self.position_final <= 0:
            return (self.position_init * (1 - f) + self.position_final * f) * extent
        return float(np.exp((1 - f) * np.log(self.position_init) + f * np.log(self.position_final))) * extent


@dataclass(eq=False)
class OptimState:
    """Adam moments per parameter group, resized in lockstep with the cloud."""

    m: dict
    v: dict
    lr: LearningRates = field(default_factory=LearningRates)
    extent: float = 1.0
    step: int = 0
    skipped: int = 0

    @classmethod
    def create(cls, cloud: GaussianCloud, lr: LearningRates = LearningRates(), extent: float = 1.0) -> "OptimState":
        zeros = {g: np.zeros_like(getattr(cloud, g), dtype=np.float64) for g in GROUPS}
        return cls(m=zeros, v={g: a.copy() for g, a in zeros.items()}, lr=lr, extent=extent)

    def __len__(self) -> int:
        return self.m["positions"].shape[0]

    def group_lr(self, group: str, k: int | None = None):
        lr = self.lr
        if group == "positions":
            return lr.position_lr(self.step, self.extent)
        if group == "rotations":
            return lr.rotation
        if group == "log_scales":
            return lr.scale
        if group == "opacity_logits":
            return lr.opacity
        scale = np.full((1, k, 1), lr.color / 20.0)
        scale[:, 0] = lr.color
        return scale

    def take(self, index) -> None:
        index = np.asarray(index)
        for g in GROUPS:
            self.m[g] = self.m[g][index]
            self.v[g] = self.v[g][index]

    def extend(self, n: int) -> None:
        for g in GROUPS:
            pad = np.zeros((n,) + self.m[g].shape[1:])
            self.m[g] = np.concatenate([self.m[g], pad])
            self.v[g] = np.concatenate([self.v[g], pad])

    def congruent_with(self, cloud: GaussianCloud) -> bool:
        return all(self.m[g].shape == getattr(cloud, g).shape == self.v[g].shape for g in GROUPS)

    def to_arrays(self) -> dict:
        out = {"step": np.array(self.step), "skipped": np.array(self.skipped), "extent": np.array(self.extent)}
        for g in GROUPS:
            out[f"m_{g}"] = self.m[g]
            out[f"v_{g}"] = self.v[g]
        return out

    @classmethod
    def from_arrays(cls, data, lr: LearningRates = LearningRates()) -> "OptimState":
        return cls(
            m={g: np.array(data[f"m_{g}"]) for g in GROUPS},
            v={g: np.array(data[f"v_{g}"]) for g in GROUPS},
            lr=lr,
            extent=float(data["extent"]),
            step=int(data["step"]),
            skipped=int(data["skipped"]),
        )


def adam_step(state: OptimState, gradients: dict, cloud: GaussianCloud):
    """One Adam update of every parameter group. Returns ``(cloud, state)``.

    A step with any non-finite gradient is skipped entirely and counted in
    ``state.skipped``.
    """
    if not state.congruent_with(cloud):
        raise InvalidParameterError("optimizer state is not congruent with the cloud")
    for g in GROUPS:
        if np.shape(gradients[g]) != getattr(cloud, g).shape:
            raise InvalidParameterError(f"gradient for {g} has shape {np.shape(gradients[g])}")
    if not all(np.all(np.isfinite(gradients[g])) for g in GROUPS):
        state.skipped += 1
        log.warning("non-finite gradient, skipping step %d (%d skipped so far)", state.step + 1, state.skipped)
        return cloud, state

    lr = state.lr
    state.step += 1
    t = state.step
    bc1 = 1.0 - lr.beta1**t
    bc2 = 1.0 - lr.beta2**t
    new = {}
    for g in GROUPS:
        grad = np.asarray(gradients[g], dtype=np.float64)
        m = lr.beta1 * state.m[g] + (1.0 - lr.beta1) * grad
        v = lr.beta2 * state.v[g] + (1.0 - lr.beta2) * grad * grad
        state.m[g], state.v[g] = m, v
        step_lr = state.group_lr(g, cloud.sh.shape[1])
        new[g] = getattr(cloud, g) - step_lr * (m / bc1) / (np.sqrt(v / bc2) + lr.eps)
    q = new["rotations"]
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    new["rotations"] = np.where(norm > 0, q / np.where(norm > 0, norm, 1.0), np.array([1.0, 0, 0, 0]))
    return cloud.replace(**new), state


@dataclass(frozen=True)
class DensifyConfig:
    grad_threshold: float = 2e-4
    scale_split_threshold: float = 0.01  # world units; train() scales the default by the scene extent
    interval: int = 100
    opacity_prune_threshold: float = 0.005
    densify_from: int = 500
    densify_until: int = 15000
    max_screen_radius: float | None = None  # pixels; None means the larger image side
    max_gaussians: int = 200_000

    def __post_init__(self):
        for name in ("grad_threshold", "scale_split_threshold", "opacity_prune_threshold"):
            if not getattr(self, name) > 0:
                raise InvalidParameterError(f"{name} must be > 0")
        if self.interval < 1:
            raise InvalidParameterError("densify interval must be >= 1")


@dataclass(eq=False)
class DensifyStats:
    """Mean screen-space positional gradient norms since the last densify event."""

    grad_sum: np.ndarray
    count: np.ndarray
    dir_sum: np.ndarray  # summed world-space positional gradients
    max_radius: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "DensifyStats":
        return cls(np.zeros(n), np.zeros(n, dtype=np.int64), np.zeros((n, 3)), np.zeros(n))

    def mean_grad(self) -> np.ndarray:
        return np.where(self.count > 0, self.grad_sum / np.maximum(self.count, 1), 0.0)

    def update(self, grads, width: int, height: int, radii) -> None:
        vis = grads.visible
        # pixel-space gradients expressed per normalized device coordinate
        g = grads.mean2d[vis] * np.array([0.5 * width, 0.5 * height])
        self.grad_sum[vis] += np.linalg.norm(g, axis=1)
        self.count[vis] += 1
        self.dir_sum[vis] += grads.positions[vis]
        self.max_radius[vis] = np.maximum(self.max_radius[vis], np.asarray(radii)[vis])

    def take(self, index) -> None:
        self.grad_sum, self.count = self.grad_sum[index], self.count[index]
        self.dir_sum, self.max_radius = self.dir_sum[index], self.max_radius[index]

    def extend(self, n: int) -> None:
        other = DensifyStats.zeros(n)
        self.grad_sum = np.concatenate([self.grad_sum, other.grad_sum])
        self.count = np.concatenate([self.count, other.count])
        self.dir_sum = np.concatenate([self.dir_sum, other.dir_sum])
        self.max_radius = np.concatenate([self.max_radius, other.max_radius])


def _grad_norms(grads) -> np.ndarray:
    if isinstance(grads, DensifyStats):
        return grads.mean_grad()
    return np.asarray(grads, dtype=np.float64).reshape(-1)


def clone_candidates(cloud: GaussianCloud, grads, cfg: DensifyConfig) -> np.ndarray:
    big_grad = _grad_norms(grads) > cfg.grad_threshold
    return np.flatnonzero(big_grad & (cloud.scales().max(axis=1) <= cfg.scale_split_threshold))


def split_candidates(cloud: GaussianCloud, grads, cfg: DensifyConfig) -> np.ndarray:
    big_grad = _grad_norms(grads) > cfg.grad_threshold
    return np.flatnonzero(big_grad & (cloud.scales().max(axis=1) > cfg.scale_split_threshold))


def densify_clone(cloud, grads, cfg: DensifyConfig, directions=None, step: float = 0.0, state=None, iteration=0):
    """Append a copy of every small high-gradient Gaussian.

    The copy moves ``step`` world units against ``directions`` (the
    accumulated positional gradient). Originals are untouched.
    """
    idx = clone_candidates(cloud, grads, cfg)
    if len(idx) == 0:
        return cloud
    copies = cloud.take(idx)
    if directions is not None and step > 0:
        d = np.asarray(directions, dtype=np.float64)[idx]
        norm = np.linalg.norm(d, axis=1, keepdims=True)
        offset = np.where(norm > 0, -step * d / np.where(norm > 0, norm, 1.0), 0.0)
        copies = copies.replace(positions=copies.positions + offset)
    copies = copies.replace(tags=np.full(len(idx), iteration, dtype=np.int64))
    if state is not None:
        state.extend(len(idx))
    return cloud.concat(copies)


def densify_split(cloud, grads, cfg: DensifyConfig, rng=None, state=None, iteration=0):
    """Replace every large high-gradient Gaussian by two children drawn from it.

    Children keep rotation, opacity and color; scales shrink by 1.6.
    Survivors keep their order, children are appended.
    """
    idx = split_candidates(cloud, grads, cfg)
    if len(idx) == 0:
        return cloud
    rng = np.random.default_rng(0) if rng is None else rng
    parents = cloud.take(np.repeat(idx, SPLIT_CHILDREN))
    z = rng.standard_normal((len(parents), 3)) * parents.scales()
    samples = np.einsum("nij,nj->ni", quaternion_to_matrix(parents.rotations), z) + parents.positions
    children = parents.replace(
        positions=samples,
        log_scales=parents.log_scales - np.log(SPLIT_SCALE_DIVISOR),
        tags=np.full(len(parents), iteration, dtype=np.int64),
    )
    keep = np.setdiff1d(np.arange(len(cloud)), idx)
    if state is not None:
        state.take(keep)
        state.extend(len(children))
    return cloud.take(keep).concat(children)


def prune(cloud, cfg: DensifyConfig, radii=None, radius_bound=None, state=None):
    """Drop near-transparent Gaussians and those whose screen radius blew up."""
    drop = cloud.opacities() < cfg.opacity_prune_threshold
    bound = cfg.max_screen_radius if cfg.max_screen_radius is not None else radius_bound
    if radii is not None and bound is not None:
        drop |= np.asarray(radii) > bound
    if not drop.any():
        return cloud
    keep = np.flatnonzero(~drop)
    if state is not None:
        state.take(keep)
    return cloud.take(keep)


@dataclass(frozen=True)
class TrainConfig:
    total_iterations: int = 30000
    propagation_stages: int = 3
    propagation_triggers: tuple | None = None  # None: defaults that fall before total_iterations
    mask_mode: str = "exclude"
    use_masks: bool = True
    dilation_window: int = 5
    loss: LossWeights = field(default_factory=LossWeights)
    lr: LearningRates = field(default_factory=LearningRates)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    propagation: object = None  # PropagationConfig; default constructed lazily
    seed: int = 0
    background: tuple = (0.0, 0.0, 0.0)
    sh_degree_interval: int = 1000
    split_threshold_relative: bool = True  # densify.scale_split_threshold is a fraction of the scene extent
    checkpoint_interval: int = 0
    checkpoint_dir: str | None = None
    raster: RasterSettings = DEFAULT_SETTINGS

    def __post_init__(self):
        if self.total_iterations < 0:
            raise InvalidParameterError("total_iterations must be >= 0")
        if self.mask_mode not in MASK_MODES:
            raise InvalidParameterError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")
        triggers = self.triggers()
        if any(b <= a for a, b in zip(triggers, triggers[1:])):
            raise InvalidParameterError("propagation triggers must be strictly increasing")
        if any(t >= self.total_iterations or t < 1 for t in triggers):
            raise InvalidParameterError("propagation triggers must lie in [1, total_iterations)")

    def triggers(self) -> tuple:
        if self.propagation_triggers is None:
            picked = [t for t in DEFAULT_TRIGGERS[: self.propagation_stages] if t < self.total_iterations]
            return tuple(picked)
        return tuple(int(t) for t in self.propagation_triggers)

    def flat(self) -> dict:
        """Flat ``key -> value`` view, nested groups prefixed (``loss.lam``)."""
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in ("loss", "lr", "densify", "propagation", "raster"):
                if value is None:
                    continue
                for sub in fields(value):
                    out[f"{f.name}.{sub.name}"] = getattr(value, sub.name)
            else:
                out[f.name] = value
        return out


@dataclass(eq=False)
class TrainResult:
    cloud: GaussianCloud
    log: list
    state: OptimState
    reference_normals: dict = field(default_factory=dict)
    spawned: list = field(default_factory=list)  # count per propagation stage

    def loss_rows(self) -> list:
        return self.log


def _active_view(cloud: GaussianCloud, degree: int) -> GaussianCloud:
    if degree >= cloud.sh_degree:
        return cloud
    return cloud.replace(sh=cloud.sh[:, : _sh.num_coeffs(degree)], sh_degree=degree)


def _prepare_masks(dataset: Dataset, cfg: TrainConfig) -> dict:
    if not cfg.use_masks:
        return {}
    out = {}
    for f in dataset.frames:
        if f.mask is not None:
            out[f.name] = dilate_object(f.mask, cfg.dilation_window)
    return out


def _split_threshold(cfg: TrainConfig, extent: float) -> DensifyConfig:
    if cfg.split_threshold_relative:
        return replace(cfg.densify, scale_split_threshold=cfg.densify.scale_split_threshold * extent)
    return cfg.densify


def train_step(cloud, frame, cfg: TrainConfig, mask, degree, reference=None):
    """Forward + backward for one view. Returns (terms, grads dict, CloudGradients, radii)."""
    view = _active_view(cloud, degree)
    cam = frame.camera
    out, ctx = render(view, cam, cfg.background, cfg.raster, return_context=True)
    validity = None
    keep = None
    if mask is not None:
        if cfg.mask_mode in ("replace", "both"):
            keep = mask.astype(np.float64)
            out.color = apply_color_mask(out.color, mask, np.asarray(cfg.background, dtype=np.float64))
        if cfg.mask_mode in ("exclude", "both"):
            validity = mask.astype(np.float64)
    ref_n, ref_valid = (None, None) if reference is None else reference
    terms, g = total_loss(out, frame.image, cloud, cfg.loss, validity, ref_n, ref_valid, grad=True)
    grad_color = g["color"] if keep is None else g["color"] * keep[..., None]
    use_normal = ref_n is not None and cfg.loss.w_normal > 0
    cg = render_backward(
        view, cam, cfg.background,
        grad_color=grad_color,
        grad_normal=g["normal"] if use_normal else None,
        context=ctx,
    )
    sh_grad = np.zeros_like(cloud.sh)
    sh_grad[:, : cg.sh.shape[1]] = cg.sh
    grads = {
        "positions": cg.positions,
        "rotations": cg.rotations,
        "log_scales": cg.log_scales + g["log_scales"],
        "opacity_logits": cg.opacity_logits + g["opacity_logits"],
        "sh": sh_grad,
    }
    radii = np.zeros(len(cloud))
    radii[ctx.splats.index] = ctx.splats.radius
    return terms, grads, cg, radii


def train(dataset: Dataset, cfg: TrainConfig = TrainConfig(), initial: GaussianCloud | None = None, resume=None,
          callback=None) -> TrainResult:
    """Optimize a Gaussian cloud against the dataset's frames.

    ``resume`` is a checkpoint mapping (see ``io.load_checkpoint``) holding the
    cloud, optimizer state, iteration counter and RNG state.
    """
    cloud = initial if initial is not None else dataset.initial_cloud
    if len(dataset.frames) < 2:
        raise DatasetError("training needs at least two views")
    if cloud is None or len(cloud) == 0:
        raise DatasetError("training needs a non-empty initial cloud")
    require = cfg.use_masks
    dataset.check(require_masks=require)
    cloud.validate()

    extent = dataset.scene_extent()
    densify_cfg = _split_threshold(cfg, extent)
    masks = _prepare_masks(dataset, cfg)
    rng = np.random.default_rng(cfg.seed)
    state = OptimState.create(cloud, cfg.lr, extent)
    log_rows: list = []
    references: dict = {}
    spawned: list = []
    start = 0
    order: list = []
    if resume is not None:
        cloud = resume["cloud"]
        state = OptimState.from_arrays(resume["state"], cfg.lr)
        start = int(resume["iteration"])
        rng.bit_generator.state = resume["rng_state"]
        order = list(resume.get("order", []))
        log_rows = [list(r) for r in resume.get("log", [])]
        references = resume.get("references", {})
    stats = DensifyStats.zeros(len(cloud))
    if resume is not None and "stats" in resume:
        s = resume["stats"]
        stats = DensifyStats(s["grad_sum"], s["count"], s["dir_sum"], s["max_radius"])
    triggers = set(cfg.triggers())
    names = [f.name for f in dataset.frames]
    w_max = max(max(f.camera.width, f.camera.height) for f in dataset.frames)

    for it in range(start + 1, cfg.total_iterations + 1):
        if not order:
            order = list(rng.permutation(len(dataset.frames)))
        frame = dataset.frames[order.pop()]
        degree = min(cloud.sh_degree, (it - 1) // cfg.sh_degree_interval) if cfg.sh_degree_interval > 0 else cloud.sh_degree
        terms, grads, cg, radii = train_step(
            cloud, frame, cfg, masks.get(frame.name), degree, references.get(frame.name)
        )
        cloud, state = adam_step(state, grads, cloud)
        if it <= densify_cfg.densify_until:
            stats.update(cg, frame.camera.width, frame.camera.height, radii)
        if densify_cfg.densify_from < it <= densify_cfg.densify_until and it % densify_cfg.interval == 0:
            cloud = _densify_and_prune(cloud, stats, densify_cfg, state, rng, it, w_max)
            stats = DensifyStats.zeros(len(cloud))
        if it in triggers:
            from .propagation import PropagationConfig, propagate_stage

            pcfg = cfg.propagation if cfg.propagation is not None else PropagationConfig()
            result = propagate_stage(cloud, dataset, pcfg, background=cfg.background, iteration=it,
                                     settings=cfg.raster)
            n_new = len(result.cloud) - len(cloud)
            cloud = result.cloud
            state.extend(n_new)
            stats.extend(n_new)
            references = result.references
            spawned.append(n_new)
        log_rows.append([it] + terms.as_row() + [len(cloud)])
        if callback is not None:
            callback(it, cloud, terms)
        if cfg.checkpoint_interval and cfg.checkpoint_dir and it % cfg.checkpoint_interval == 0:
            from .io import save_checkpoint

            save_checkpoint(cfg.checkpoint_dir, it, cloud, state, rng, order, log_rows, cfg, references, stats)
        if not state.congruent_with(cloud):
            raise RuntimeError("optimizer state fell out of step with the cloud")
    return TrainResult(cloud=cloud, log=log_rows, state=state, reference_normals=references, spawned=spawned)


def _densify_and_prune(cloud, stats, cfg: DensifyConfig, state, rng, it, radius_bound):
    grads = stats.mean_grad()
    radii = stats.max_radius
    if len(cloud) < cfg.max_gaussians:
        n0 = len(cloud)
        step = state.group_lr("positions")
        cloud = densify_clone(cloud, grads, cfg, directions=stats.dir_sum, step=step, state=state, iteration=it)
        # clones start with no gradient or radius history
        grads = np.concatenate([grads, np.zeros(len(cloud) - n0)])
        radii = np.concatenate([radii, np.zeros(len(cloud) - n0)])
        split_idx = split_candidates(cloud, grads, cfg)
        keep = np.setdiff1d(np.arange(len(cloud)), split_idx)
        cloud = densify_split(cloud, grads, cfg, rng=rng, state=state, iteration=it)
        radii = np.concatenate([radii[keep], np.zeros(len(split_idx) * SPLIT_CHILDREN)])
    return prune(cloud, cfg, radii=radii, radius_bound=radius_bound, state=state)


def smoothed(values, window: int = 50) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < window:
        return values.copy()
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def loss_log_header() -> list:
    return list(LOG_COLUMNS)


def terms_from_row(row) -> LossTerms:
    return LossTerms(*row[1:7])
