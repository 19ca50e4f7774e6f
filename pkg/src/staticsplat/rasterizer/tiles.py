"""Splat-to-tile binning with a canonical front-to-back order."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..exceptions import CapacityError
from .projection import ProjectedSplats


@dataclass(frozen=True, eq=False)
class TileGrid:
    tile_size: int
    n_tiles_x: int
    n_tiles_y: int
    ranges: np.ndarray  # (n_tiles, 2) half-open slices into pair_splat
    pair_splat: np.ndarray  # local splat index per (tile, splat) pair

    @property
    def n_pairs(self) -> int:
        return self.pair_splat.shape[0]

    def tile_list(self, tile: int) -> np.ndarray:
        start, end = self.ranges[tile]
        return self.pair_splat[start:end]


def pixel_footprint(splats: ProjectedSplats, width: int, height: int):
    """Inclusive pixel bounds (x0, x1, y0, y1) of each splat's support, clipped to the image."""
    u, v = splats.mean2d[:, 0], splats.mean2d[:, 1]
    hx, hy = splats.half_extent[:, 0], splats.half_extent[:, 1]
    x0 = np.clip(np.ceil(u - hx), 0, width - 1).astype(np.int64)
    x1 = np.clip(np.floor(u + hx), -1, width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(v - hy), 0, height - 1).astype(np.int64)
    y1 = np.clip(np.floor(v + hy), -1, height - 1).astype(np.int64)
    empty = (u + hx < 0) | (u - hx > width - 1) | (v + hy < 0) | (v - hy > height - 1)
    x1 = np.where(empty | (x1 < x0), x0 - 1, x1)
    y1 = np.where(empty | (y1 < y0), y0 - 1, y1)
    return x0, x1, y0, y1


def build_tiles(splats: ProjectedSplats, width: int, height: int, tile_size: int = 16, max_pairs: int = 1 << 26):
    n_tx = -(-width // tile_size)
    n_ty = -(-height // tile_size)
    x0, x1, y0, y1 = pixel_footprint(splats, width, height)
    valid = (x1 >= x0) & (y1 >= y0)
    tx0, tx1 = x0 // tile_size, x1 // tile_size
    ty0, ty1 = y0 // tile_size, y1 // tile_size
    nx = np.where(valid, tx1 - tx0 + 1, 0)
    ny = np.where(valid, ty1 - ty0 + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    if total > max_pairs:
        raise CapacityError(f"{total} splat-tile pairs exceed the configured cap of {max_pairs}")

    splat_of_pair = np.repeat(np.arange(len(splats)), counts)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)[: len(counts)]
    local = np.arange(total) - np.repeat(offsets, counts)
    nx_p = np.repeat(nx, counts)
    tile_x = np.repeat(tx0, counts) + local % np.maximum(nx_p, 1)
    tile_y = np.repeat(ty0, counts) + local // np.maximum(nx_p, 1)
    tile_id = tile_y * n_tx + tile_x

    order = np.lexsort((splats.index[splat_of_pair], splats.depth[splat_of_pair], tile_id))
    pair_splat = splat_of_pair[order]
    sorted_tiles = tile_id[order]
    n_tiles = n_tx * n_ty
    starts = np.searchsorted(sorted_tiles, np.arange(n_tiles), side="left")
    ends = np.searchsorted(sorted_tiles, np.arange(n_tiles), side="right")
    return TileGrid(
        tile_size=tile_size,
        n_tiles_x=n_tx,
        n_tiles_y=n_ty,
        ranges=np.stack([starts, ends], axis=1).astype(np.int64),
        pair_splat=pair_splat.astype(np.int64),
    )
