"""Input checks shared by the estimator wrappers and the command line."""

from __future__ import annotations

import numpy as np

from .dataset import Dataset
from .exceptions import DatasetError, DimensionMismatchError, InvalidParameterError
from .gaussians import Camera


def check_image(image, name: str = "image") -> np.ndarray:
    """Float (H, W, 3) array with every value in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionMismatchError(f"{name} must have shape (H, W, 3), got {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise InvalidParameterError(f"{name} values must be finite and within [0, 1]")
    return img


def check_mask(mask, shape=None, name: str = "mask") -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise DimensionMismatchError(f"{name} must be 2-D, got shape {m.shape}")
    if shape is not None and m.shape != tuple(shape):
        raise DimensionMismatchError(f"{name} has shape {m.shape}, expected {tuple(shape)}")
    if not np.all((m == 0) | (m == 1)):
        raise InvalidParameterError(f"{name} must be binary (0 = object, 1 = background)")
    return m.astype(np.uint8)


def check_odd_window(window, name: str = "window") -> int:
    if isinstance(window, bool) or not isinstance(window, (int, np.integer)) or window < 1 or window % 2 == 0:
        raise InvalidParameterError(f"{name} must be an odd integer >= 1, got {window!r}")
    return int(window)


def check_cameras(cameras) -> list:
    cams = list(cameras)
    for i, cam in enumerate(cams):
        if not isinstance(cam, Camera):
            raise InvalidParameterError(f"item {i} is not a Camera")
    return cams


def check_dataset(dataset, require_masks: bool = False, min_views: int = 2) -> Dataset:
    if not isinstance(dataset, Dataset):
        raise InvalidParameterError(f"expected a Dataset, got {type(dataset).__name__}")
    if len(dataset.frames) < min_views:
        raise DatasetError(f"need at least {min_views} views, got {len(dataset.frames)}")
    for f in dataset.frames:
        check_image(f.image, f"frame {f.name}")
        if f.mask is not None:
            check_mask(f.mask, f.image.shape[:2], f"mask of {f.name}")
    dataset.check(require_masks=require_masks)
    return dataset
