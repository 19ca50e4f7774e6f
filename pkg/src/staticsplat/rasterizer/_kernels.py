"""Numba per-tile compositing kernels (forward and backward).

Feature layout per splat: r, g, b, depth, nx, ny, nz. Pixel centers are at
integer coordinates. Backward gradients are written per (tile, splat) pair,
so tiles never share output rows and the reduction order stays fixed.
"""

import numpy as np
from numba import njit

NUM_FEATURES = 7
# dmean_x, dmean_y, dconic_a, dconic_b, dconic_c, dopacity, then one per feature
PAIR_GRAD_WIDTH = 6 + NUM_FEATURES


def q_cutoff(opacity, alpha_min):
    """Per-splat bound on the quadratic form beyond which alpha < alpha_min for sure.

    The margin keeps the cut conservative; the exact alpha test still runs
    after it, so skipping the exponential never changes a result.
    """
    op = np.asarray(opacity, dtype=np.float64)
    with np.errstate(divide="ignore"):
        cut = 2.0 * np.log(op / alpha_min)
    return np.where(op >= alpha_min, cut * (1.0 + 1e-9) + 1e-9, -1.0)


def support_bounds(mean2d, conic, qcut):
    """Pixel box ``(xlo, xhi, ylo, yhi)`` of the ellipse ``q <= qcut`` for each splat.

    Rows and columns outside the box cannot reach alpha_min, so the kernels
    skip them without evaluating the Gaussian.
    """
    a, b, c = conic[:, 0], conic[:, 1], conic[:, 2]
    det = a * c - b * b
    q = np.maximum(qcut, 0.0)
    hx = np.sqrt(q * c / det) * (1.0 + 1e-9) + 1e-9
    hy = np.sqrt(q * a / det) * (1.0 + 1e-9) + 1e-9
    dead = qcut < 0
    hx = np.where(dead, -1.0, hx)
    hy = np.where(dead, -1.0, hy)
    return np.stack([mean2d[:, 0] - hx, mean2d[:, 0] + hx, mean2d[:, 1] - hy, mean2d[:, 1] + hy], axis=1)


@njit(cache=True)
def _row_list(rows, start, end, pair_splat, bounds, py):
    n = 0
    for k in range(start, end):
        s = pair_splat[k]
        if bounds[s, 2] <= py and py <= bounds[s, 3]:
            rows[n] = k
            n += 1
    return n


@njit(cache=True)
def _max_tile_len(ranges):
    m = 0
    for tile in range(ranges.shape[0]):
        m = max(m, ranges[tile, 1] - ranges[tile, 0])
    return m


@njit(cache=True)
def forward_tiles(
    ranges, pair_splat, mean2d, conic, opac, qcut, bounds, feats, width, height, tile_size, n_tiles_x,
    alpha_min, alpha_max, t_eps,
):
    n_tiles = ranges.shape[0]
    accum = np.zeros((height, width, NUM_FEATURES))
    final_t = np.ones((height, width))
    last = np.zeros((height, width), dtype=np.int64)
    count = np.zeros((height, width), dtype=np.int64)
    rows = np.empty(_max_tile_len(ranges), dtype=np.int64)
    for tile in range(n_tiles):
        start = ranges[tile, 0]
        end = ranges[tile, 1]
        if end <= start:
            continue
        tx = tile % n_tiles_x
        ty = tile // n_tiles_x
        x0 = tx * tile_size
        y0 = ty * tile_size
        x1 = min(x0 + tile_size, width)
        y1 = min(y0 + tile_size, height)
        for py in range(y0, y1):
            n_rows = _row_list(rows, start, end, pair_splat, bounds, py)
            for px in range(x0, x1):
                t = 1.0
                n_used = 0
                n_last = 0
                for j in range(n_rows):
                    k = rows[j]
                    s = pair_splat[k]
                    if px < bounds[s, 0] or px > bounds[s, 1]:
                        continue
                    dx = px - mean2d[s, 0]
                    dy = py - mean2d[s, 1]
                    q = conic[s, 0] * dx * dx + 2.0 * conic[s, 1] * dx * dy + conic[s, 2] * dy * dy
                    if q > qcut[s]:
                        continue
                    g = np.exp(-0.5 * q)
                    a_raw = opac[s] * g
                    if a_raw < alpha_min:
                        continue
                    a = min(alpha_max, a_raw)
                    w = a * t
                    for c in range(NUM_FEATURES):
                        accum[py, px, c] += w * feats[s, c]
                    t *= 1.0 - a
                    n_used += 1
                    n_last = k - start + 1
                    if t < t_eps:
                        break
                final_t[py, px] = t
                last[py, px] = n_last
                count[py, px] = n_used
    return accum, final_t, last, count


@njit(cache=True)
def backward_tiles(
    ranges, pair_splat, mean2d, conic, opac, qcut, bounds, feats, width, height, tile_size, n_tiles_x,
    alpha_min, alpha_max, final_t, last, grad_feat, grad_alpha, background,
):
    """Pair-level gradients.

    ``grad_feat`` is dL/d(accumulated feature) per pixel; background enters the
    color channels through the final transmittance. ``grad_alpha`` is dL/dA
    with A = 1 - T_final.
    """
    n_pairs = pair_splat.shape[0]
    out = np.zeros((n_pairs, PAIR_GRAD_WIDTH))
    n_tiles = ranges.shape[0]
    after = np.zeros(NUM_FEATURES)
    rows = np.empty(_max_tile_len(ranges), dtype=np.int64)
    for tile in range(n_tiles):
        start = ranges[tile, 0]
        end = ranges[tile, 1]
        if end <= start:
            continue
        tx = tile % n_tiles_x
        ty = tile // n_tiles_x
        x0 = tx * tile_size
        y0 = ty * tile_size
        x1 = min(x0 + tile_size, width)
        y1 = min(y0 + tile_size, height)
        for py in range(y0, y1):
            n_rows = _row_list(rows, start, end, pair_splat, bounds, py)
            for px in range(x0, x1):
                n_last = last[py, px]
                if n_last == 0:
                    continue
                t_final = final_t[py, px]
                t = t_final
                for c in range(NUM_FEATURES):
                    after[c] = 0.0
                for c in range(3):
                    after[c] = t_final * background[c]
                after_alpha = 0.0
                g_a = grad_alpha[py, px]
                k_last = start + n_last - 1
                for j in range(n_rows - 1, -1, -1):
                    k = rows[j]
                    if k > k_last:
                        continue
                    s = pair_splat[k]
                    if px < bounds[s, 0] or px > bounds[s, 1]:
                        continue
                    dx = px - mean2d[s, 0]
                    dy = py - mean2d[s, 1]
                    q = conic[s, 0] * dx * dx + 2.0 * conic[s, 1] * dx * dy + conic[s, 2] * dy * dy
                    if q > qcut[s]:
                        continue
                    g = np.exp(-0.5 * q)
                    a_raw = opac[s] * g
                    if a_raw < alpha_min:
                        continue
                    a = min(alpha_max, a_raw)
                    one_minus = 1.0 - a
                    t = t / one_minus
                    w = a * t
                    d_alpha = 0.0
                    for c in range(NUM_FEATURES):
                        gc = grad_feat[py, px, c]
                        d_alpha += gc * (feats[s, c] * t - after[c] / one_minus)
                        out[k, 6 + c] += gc * w
                        after[c] += w * feats[s, c]
                    d_alpha += g_a * (t - after_alpha / one_minus)
                    after_alpha += w
                    if a_raw >= alpha_max:
                        continue
                    out[k, 5] += d_alpha * g
                    d_q = -0.5 * d_alpha * opac[s] * g
                    out[k, 0] += -d_q * (2.0 * conic[s, 0] * dx + 2.0 * conic[s, 1] * dy)
                    out[k, 1] += -d_q * (2.0 * conic[s, 1] * dx + 2.0 * conic[s, 2] * dy)
                    out[k, 2] += d_q * dx * dx
                    out[k, 3] += d_q * 2.0 * dx * dy
                    out[k, 4] += d_q * dy * dy
    return out
