"""In-memory multi-view dataset."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DatasetError, DimensionMismatchError
from .gaussians import Camera, GaussianCloud


@dataclass(eq=False)
class Frame:
    name: str
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    camera: Camera
    mask: np.ndarray | None = None  # (H, W) uint8, 1 = background
    camera_id: str | None = None


@dataclass(eq=False)
class Dataset:
    frames: list[Frame]
    initial_cloud: GaussianCloud | None = None
    test_frames: list[Frame] = field(default_factory=list)
    # optional ground truth, keyed by frame name
    clean_images: dict = field(default_factory=dict)
    depths: dict = field(default_factory=dict)
    normals: dict = field(default_factory=dict)
    regions: dict = field(default_factory=dict)
    scene: dict | None = None

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def cameras(self) -> list[Camera]:
        return [f.camera for f in self.frames]

    def check(self, require_masks: bool = False) -> None:
        """Raise before training if frames, masks and cameras disagree."""
        missing = []
        for f in self.frames:
            h, w = f.camera.height, f.camera.width
            if f.image.shape != (h, w, 3):
                raise DimensionMismatchError(
                    f"frame {f.name}: image {f.image.shape} does not match camera {(h, w, 3)}"
                )
            if f.mask is None:
                missing.append(f.name)
            elif f.mask.shape != (h, w):
                raise DimensionMismatchError(f"frame {f.name}: mask {f.mask.shape} does not match camera {(h, w)}")
        if require_masks and missing:
            raise DatasetError("missing masks for frames: " + ", ".join(missing))

    def scene_extent(self) -> float:
        if self.scene and "extent" in self.scene:
            return float(self.scene["extent"])
        centers = np.array([c.center for c in self.cameras])
        return float(np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1)) * 1.1) or 1.0
