"""scikit-learn style wrappers around the reconstruction pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .io import psnr
from .losses import LossWeights
from .masking import dilate_object
from .optim import TrainConfig, train
from .rasterizer import render
from .validation import check_cameras, check_dataset, check_mask, check_odd_window


class MaskDilator(TransformerMixin, BaseEstimator):
    """Grow the object region of each mask in a batch."""

    def __init__(self, window: int = 5):
        self.window = window

    def fit(self, X, y=None):
        check_odd_window(self.window)
        self.n_masks_seen_ = len(X)
        return self

    def transform(self, X):
        check_is_fitted(self, "n_masks_seen_")
        return np.stack([dilate_object(check_mask(m), self.window) for m in X])


class StaticSceneReconstructor(BaseEstimator):
    """Fit a Gaussian cloud to a multi-view dataset while ignoring moving objects.

    ``fit`` takes a :class:`~staticsplat.dataset.Dataset` with an initial
    cloud; ``predict`` renders a list of cameras; ``score`` is the mean PSNR
    on frames with reference images.
    """

    def __init__(self, iterations: int = 2000, mask_mode: str = "exclude", use_masks: bool = True,
                 lam: float = 0.2, w_flatten: float = 100.0, w_sparse: float = 0.01, w_normal: float = 0.01,
                 dilation_window: int = 5, propagation_triggers=None, seed: int = 0, background=(0.0, 0.0, 0.0)):
        self.iterations = iterations
        self.mask_mode = mask_mode
        self.use_masks = use_masks
        self.lam = lam
        self.w_flatten = w_flatten
        self.w_sparse = w_sparse
        self.w_normal = w_normal
        self.dilation_window = dilation_window
        self.propagation_triggers = propagation_triggers
        self.seed = seed
        self.background = background

    def _config(self) -> TrainConfig:
        return TrainConfig(
            total_iterations=self.iterations,
            propagation_triggers=self.propagation_triggers,
            mask_mode=self.mask_mode,
            use_masks=self.use_masks,
            dilation_window=check_odd_window(self.dilation_window, "dilation_window"),
            loss=LossWeights(lam=self.lam, w_flatten=self.w_flatten, w_sparse=self.w_sparse, w_normal=self.w_normal),
            seed=self.seed,
            background=tuple(self.background),
        )

    def fit(self, X, y=None):
        dataset = check_dataset(X, require_masks=self.use_masks)
        result = train(dataset, self._config())
        self.cloud_ = result.cloud
        self.loss_log_ = result.log
        self.n_gaussians_ = len(result.cloud)
        return self

    def predict(self, X):
        check_is_fitted(self, "cloud_")
        return [render(self.cloud_, cam, self.background).color for cam in check_cameras(X)]

    def score(self, X, y=None):
        """Mean PSNR over held-out frames (or training frames if none are held out)."""
        check_is_fitted(self, "cloud_")
        frames = X.test_frames or X.frames
        refs = [X.clean_images.get(f.name, f.image) for f in frames]
        preds = self.predict([f.camera for f in frames])
        return float(np.mean([psnr(p, r) for p, r in zip(preds, refs)]))
