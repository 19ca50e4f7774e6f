"""Reconstruction losses and Gaussian regularizers, each with an analytic gradient.

Functions taking ``grad=True`` return ``(value, gradient)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionMismatchError, EmptyRegionError, InvalidParameterError
from .gaussians import GaussianCloud, sigmoid

SSIM_A1 = 0.01**2
SSIM_A2 = 0.03**2
SPARSE_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.2
    w_flatten: float = 100.0
    w_sparse: float = 0.01
    w_normal: float = 0.01
    s_max: float = 1.0
    ssim_window: int = 11
    a1: float = SSIM_A1
    a2: float = SSIM_A2

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise InvalidParameterError(f"lambda must be in [0, 1], got {self.lam}")
        for name in ("w_flatten", "w_sparse", "w_normal"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise InvalidParameterError(f"{name} must be finite and non-negative, got {value}")
        if not self.s_max > 0:
            raise InvalidParameterError("s_max must be positive")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise InvalidParameterError("ssim_window must be a positive odd integer")


@dataclass(frozen=True)
class PatchStats:
    mean_a: np.ndarray
    mean_b: np.ndarray
    var_a: np.ndarray
    var_b: np.ndarray
    covar: np.ndarray


def _as_hwc(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def _validity(weights, shape) -> np.ndarray:
    if weights is None:
        return np.ones(shape[:2])
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != tuple(shape[:2]):
        raise DimensionMismatchError(f"validity map {weights.shape} does not match image {shape[:2]}")
    return weights


def box_sum_valid(x: np.ndarray, k: int) -> np.ndarray:
    """Sum over every k x k window lying fully inside the first two axes."""
    c = np.cumsum(np.cumsum(x, axis=0), axis=1)
    c = np.pad(c, [(1, 0), (1, 0)] + [(0, 0)] * (x.ndim - 2))
    return c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]


def box_sum_full(x: np.ndarray, k: int) -> np.ndarray:
    """Adjoint of :func:`box_sum_valid`: spread each window value over its pixels."""
    pad = [(k - 1, k - 1), (k - 1, k - 1)] + [(0, 0)] * (x.ndim - 2)
    return box_sum_valid(np.pad(x, pad), k)


def patch_stats(a, b, window: int) -> PatchStats:
    n = float(window * window)
    ma = box_sum_valid(a, window) / n
    mb = box_sum_valid(b, window) / n
    var_a = np.maximum(box_sum_valid(a * a, window) / n - ma * ma, 0.0)
    var_b = np.maximum(box_sum_valid(b * b, window) / n - mb * mb, 0.0)
    cov = box_sum_valid(a * b, window) / n - ma * mb
    return PatchStats(ma, mb, var_a, var_b, cov)


def ssim_formula(mu_a, mu_b, var_a, var_b, covar, a1=SSIM_A1, a2=SSIM_A2):
    return ((2 * mu_a * mu_b + a1) * (2 * covar + a2)) / ((mu_a**2 + mu_b**2 + a1) * (var_a + var_b + a2))


def _ssim_windows(a, b, window, a1, a2):
    a = _as_hwc(a)
    b = _as_hwc(b)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"images differ in shape: {a.shape} vs {b.shape}")
    if window > a.shape[0] or window > a.shape[1]:
        raise InvalidParameterError(f"SSIM window {window} is larger than the image {a.shape[:2]}")
    if window < 1 or window % 2 == 0:
        raise InvalidParameterError("SSIM window must be a positive odd integer")
    st = patch_stats(a, b, window)
    return a, b, st, ssim_formula(st.mean_a, st.mean_b, st.var_a, st.var_b, st.covar, a1, a2)


def ssim(a, b, window: int = 11, a1: float = SSIM_A1, a2: float = SSIM_A2) -> float:
    """Mean SSIM over all uniform windows inside the image, averaged over channels."""
    return float(np.mean(_ssim_windows(a, b, window, a1, a2)[3]))


def l1_loss(rendered, target, weights=None, grad: bool = False):
    squeeze = np.asarray(rendered).ndim == 2
    rendered = _as_hwc(rendered)
    target = _as_hwc(target)
    if rendered.shape != target.shape:
        raise DimensionMismatchError(f"images differ in shape: {rendered.shape} vs {target.shape}")
    w = _validity(weights, rendered.shape)
    denom = w.sum()
    if denom <= 0:
        raise EmptyRegionError("no valid pixels for L1")
    diff = rendered - target
    c = rendered.shape[2]
    value = float(np.sum(np.abs(diff).mean(axis=2) * w) / denom)
    if not grad:
        return value
    g = np.sign(diff) * (w[..., None] / (denom * c))
    return value, g[..., 0] if squeeze else g


def dssim_loss(rendered, target, weights=None, window=11, a1=SSIM_A1, a2=SSIM_A2, grad: bool = False):
    """``1 - SSIM`` over windows lying fully inside the valid region."""
    squeeze = np.asarray(rendered).ndim == 2
    a, b, st, smap = _ssim_windows(rendered, target, window, a1, a2)
    w = _validity(weights, a.shape)
    n = float(window * window)
    wvalid = box_sum_valid(w, window) >= n - 0.5
    count = int(wvalid.sum())
    if count == 0:
        raise EmptyRegionError("no SSIM window lies fully inside the valid region")
    c = a.shape[2]
    value = float(1.0 - np.sum(smap * wvalid[..., None]) / (count * c))
    if not grad:
        return value

    ma, mb = st.mean_a, st.mean_b
    n1 = 2 * ma * mb + a1
    n2 = 2 * st.covar + a2
    d1 = ma**2 + mb**2 + a1
    d2 = st.var_a + st.var_b + a2
    # partials of each window's SSIM w.r.t. the window means of a, a*a and a*b
    ds_dma = (2 * mb * n2 - 2 * mb * n1) / (d1 * d2) - smap * (2 * ma / d1 - 2 * ma / d2)
    ds_dmaa = -smap / d2
    ds_dmab = 2 * n1 / (d1 * d2)
    up = -wvalid[..., None].astype(np.float64) / (count * c * n)
    g = (
        box_sum_full(up * ds_dma, window)
        + 2 * a * box_sum_full(up * ds_dmaa, window)
        + b * box_sum_full(up * ds_dmab, window)
    )
    return value, g[..., 0] if squeeze else g


def flatten_loss(cloud: GaussianCloud, s_max: float = 1.0, grad: bool = False):
    n = len(cloud)
    if n == 0:
        return (0.0, np.zeros((0, 3))) if grad else 0.0
    scales = np.exp(cloud.log_scales)
    axis = np.argmin(scales, axis=1)
    smallest = scales[np.arange(n), axis]
    value = float(np.mean(np.abs(np.minimum(smallest, s_max))))
    if not grad:
        return value
    g = np.zeros((n, 3))
    g[np.arange(n), axis] = np.where(smallest < s_max, smallest, 0.0) / n
    return value, g


def sparse_loss(cloud: GaussianCloud, grad: bool = False):
    n = len(cloud)
    if n == 0:
        return (0.0, np.zeros(0)) if grad else 0.0
    raw = sigmoid(cloud.opacity_logits)
    alpha = np.clip(raw, SPARSE_EPS, 1.0 - SPARSE_EPS)
    ent = alpha * np.log(alpha) + (1 - alpha) * np.log(1 - alpha)
    value = float(-np.mean(ent))
    if not grad:
        return value
    inside = (raw > SPARSE_EPS) & (raw < 1.0 - SPARSE_EPS)
    d_alpha = -(np.log(alpha) - np.log(1 - alpha)) / n
    return value, np.where(inside, d_alpha * raw * (1 - raw), 0.0)


def normal_loss(rendered_normals, reference_normals, validity=None, grad: bool = False):
    rendered_normals = np.asarray(rendered_normals, dtype=np.float64)
    reference_normals = np.asarray(reference_normals, dtype=np.float64)
    if rendered_normals.shape != reference_normals.shape:
        raise DimensionMismatchError("normal maps differ in shape")
    w = _validity(validity, rendered_normals.shape)
    denom = w.sum()
    if denom <= 0:
        raise EmptyRegionError("no valid pixels for the normal loss")
    cos = np.sum(rendered_normals * reference_normals, axis=-1)
    value = float(np.sum((1.0 - cos) * w) / denom)
    if not grad:
        return value
    return value, -reference_normals * (w / denom)[..., None]


@dataclass
class LossTerms:
    total: float
    l1: float
    dssim: float
    flatten: float
    sparse: float
    normal: float

    def as_row(self) -> list:
        return [self.total, self.l1, self.dssim, self.flatten, self.sparse, self.normal]


def total_loss(
    rendered,
    target,
    cloud: GaussianCloud,
    weights: LossWeights = LossWeights(),
    validity=None,
    reference_normals=None,
    normal_validity=None,
    grad: bool = False,
):
    """Weighted objective ``(1 - lam) L1 + lam DSSIM + regularizers``.

    ``rendered`` is a :class:`RenderOutput`. The normal term is skipped (zero)
    when no reference normals are supplied or none are valid, and the DSSIM
    term when no SSIM window fits inside the valid region. With
    ``grad=True`` returns ``(terms, grads)`` where grads holds the image-side
    upstream maps and the direct cloud-parameter gradients.
    """
    color = rendered.color
    lam = weights.lam
    l1 = l1_loss(color, target, validity, grad=grad)
    try:
        ds = dssim_loss(color, target, validity, weights.ssim_window, weights.a1, weights.a2, grad=grad)
    except EmptyRegionError:  # heavily masked frame: L1 alone still has pixels
        ds = (0.0, np.zeros_like(color)) if grad else 0.0
    fl = flatten_loss(cloud, weights.s_max, grad=grad)
    sp = sparse_loss(cloud, grad=grad)
    use_normal = (
        weights.w_normal > 0
        and reference_normals is not None
        and (normal_validity is None or np.asarray(normal_validity).sum() > 0)
    )
    if use_normal:
        nl = normal_loss(rendered.normal, reference_normals, normal_validity, grad=grad)
    else:
        nl = (0.0, np.zeros_like(rendered.normal)) if grad else 0.0

    val = (lambda x: x[0]) if grad else (lambda x: x)
    terms = LossTerms(
        total=0.0, l1=val(l1), dssim=val(ds), flatten=val(fl), sparse=val(sp), normal=val(nl)
    )
    terms.total = (
        (1 - lam) * terms.l1
        + lam * terms.dssim
        + weights.w_flatten * terms.flatten
        + weights.w_sparse * terms.sparse
        + weights.w_normal * terms.normal
    )
    if not grad:
        return terms
    grads = {
        "color": (1 - lam) * l1[1] + lam * ds[1],
        "normal": weights.w_normal * nl[1],
        "log_scales": weights.w_flatten * fl[1],
        "opacity_logits": weights.w_sparse * sp[1],
    }
    return terms, grads
