"""Binary moving-object masks.

Convention: 1 marks static background, 0 marks a moving object.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .exceptions import DimensionMismatchError, EmptyRegionError, InvalidParameterError

MASK_MODES = ("exclude", "replace", "both")


def as_mask(values) -> np.ndarray:
    m = np.asarray(values)
    if m.ndim != 2:
        raise DimensionMismatchError(f"mask must be 2-D, got shape {m.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise InvalidParameterError("mask values must be 0 or 1")
    return m.astype(np.uint8)


def mask_from_u8(values) -> np.ndarray:
    """Binarize an 8-bit single-channel image: >= 128 is background."""
    return (np.asarray(values) >= 128).astype(np.uint8)


def dilate_object(mask, window: int = 5) -> np.ndarray:
    """Grow the object (zero) region by a square ``window``.

    Each output pixel is the minimum over its neighborhood; pixels outside the
    image count as background.
    """
    if not isinstance(window, (int, np.integer)) or window < 1 or window % 2 == 0:
        raise InvalidParameterError(f"dilation window must be an odd integer >= 1, got {window!r}")
    mask = as_mask(mask)
    if window == 1:
        return mask.copy()
    return ndimage.minimum_filter(mask, size=window, mode="constant", cval=1)


def _check_same(shape_a, shape_b, what):
    if tuple(shape_a) != tuple(shape_b):
        raise DimensionMismatchError(f"{what}: {tuple(shape_a)} vs {tuple(shape_b)}")


def apply_color_mask(rendered, mask, background) -> np.ndarray:
    rendered = np.asarray(rendered, dtype=np.float64)
    mask = as_mask(mask)
    background = np.asarray(background, dtype=np.float64)
    if background.shape == (3,):
        background = np.broadcast_to(background, rendered.shape)
    _check_same(rendered.shape, background.shape, "rendered and background images differ")
    _check_same(rendered.shape[:2], mask.shape, "mask does not match image")
    keep = mask[..., None].astype(bool)
    return np.where(keep, rendered, background)


def apply_alpha_mask(alpha, mask) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    mask = as_mask(mask)
    _check_same(alpha.shape, mask.shape, "mask does not match alpha map")
    return alpha * mask


def expand_channels(mask, channels: int = 3) -> np.ndarray:
    mask = as_mask(mask)
    return np.repeat(mask[..., None], channels, axis=2)


def collapse_channels(mask3) -> np.ndarray:
    return np.asarray(mask3).min(axis=2).astype(np.uint8)


def masked_loss_region(image_a, image_b, mask) -> np.ndarray:
    """Per-pixel validity weights (1 on background, 0 on objects)."""
    image_a = np.asarray(image_a)
    image_b = np.asarray(image_b)
    mask = as_mask(mask)
    _check_same(image_a.shape, image_b.shape, "images differ in shape")
    _check_same(image_a.shape[:2], mask.shape, "mask does not match image")
    if not mask.any():
        raise EmptyRegionError("mask has no background pixels; the loss is undefined")
    return mask.astype(np.float64)
