"""Compiled per-pixel compositing loops (forward and backward) over tile bins."""

import numpy as np
from numba import njit

from .projection import ALPHA_MAX, ALPHA_MIN

T_MIN = 1e-4


@njit(cache=True)
def composite_forward(offsets, indices, tiles_x, tile_size, width, height,
                      mean2d, conic, opacity, feats):
    n_feat = feats.shape[1]
    out = np.zeros((height, width, n_feat))
    t_final = np.ones((height, width))
    n_proc = np.zeros((height, width), dtype=np.int64)
    n_tiles = len(offsets) - 1
    for tile in range(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        start = offsets[tile]
        end = offsets[tile + 1]
        if start == end:
            continue
        for py in range(ty * tile_size, min((ty + 1) * tile_size, height)):
            for px in range(tx * tile_size, min((tx + 1) * tile_size, width)):
                x = px + 0.5
                y = py + 0.5
                T = 1.0
                j = start
                while j < end:
                    if T < T_MIN:
                        break
                    s = indices[j]
                    dx = x - mean2d[s, 0]
                    dy = y - mean2d[s, 1]
                    q = conic[s, 0] * dx * dx + 2.0 * conic[s, 1] * dx * dy + conic[s, 2] * dy * dy
                    alpha = opacity[s] * np.exp(-0.5 * q)
                    if alpha >= ALPHA_MIN:
                        if alpha > ALPHA_MAX:
                            alpha = ALPHA_MAX
                        w = alpha * T
                        for f in range(n_feat):
                            out[py, px, f] += w * feats[s, f]
                        T *= 1.0 - alpha
                    j += 1
                n_proc[py, px] = j - start
                t_final[py, px] = T
    return out, t_final, n_proc


@njit(cache=True)
def composite_backward(offsets, indices, tiles_x, tile_size, width, height,
                       mean2d, conic, opacity, feats, n_proc, grad_out, grad_t):
    m, n_feat = feats.shape
    d_feats = np.zeros((m, n_feat))
    d_opacity = np.zeros(m)
    d_mean = np.zeros((m, 2))
    d_conic = np.zeros((m, 3))
    n_tiles = len(offsets) - 1
    max_len = 0
    for tile in range(n_tiles):
        max_len = max(max_len, offsets[tile + 1] - offsets[tile])
    alphas = np.empty(max_len)
    raws = np.empty(max_len)
    trans = np.empty(max_len)
    for tile in range(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        start = offsets[tile]
        if start == offsets[tile + 1]:
            continue
        for py in range(ty * tile_size, min((ty + 1) * tile_size, height)):
            for px in range(tx * tile_size, min((tx + 1) * tile_size, width)):
                x = px + 0.5
                y = py + 0.5
                n = n_proc[py, px]
                # replay the forward pass to recover alpha and transmittance exactly
                T = 1.0
                for k in range(n):
                    s = indices[start + k]
                    dx = x - mean2d[s, 0]
                    dy = y - mean2d[s, 1]
                    q = conic[s, 0] * dx * dx + 2.0 * conic[s, 1] * dx * dy + conic[s, 2] * dy * dy
                    raw = opacity[s] * np.exp(-0.5 * q)
                    raws[k] = raw
                    trans[k] = T
                    if raw >= ALPHA_MIN:
                        a = raw if raw <= ALPHA_MAX else ALPHA_MAX
                        alphas[k] = a
                        T *= 1.0 - a
                    else:
                        alphas[k] = 0.0
                suffix = grad_t[py, px] * T
                for k in range(n - 1, -1, -1):
                    a = alphas[k]
                    if a == 0.0:
                        continue
                    s = indices[start + k]
                    Tk = trans[k]
                    w = a * Tk
                    dot = 0.0
                    for f in range(n_feat):
                        g = grad_out[py, px, f]
                        dot += g * feats[s, f]
                        d_feats[s, f] += w * g
                    d_alpha = Tk * dot - suffix / (1.0 - a)
                    suffix += dot * w
                    if raws[k] > ALPHA_MAX:
                        continue
                    dx = x - mean2d[s, 0]
                    dy = y - mean2d[s, 1]
                    gauss = raws[k] / opacity[s]
                    d_opacity[s] += d_alpha * gauss
                    d_q = -0.5 * a * d_alpha
                    d_conic[s, 0] += d_q * dx * dx
                    d_conic[s, 1] += d_q * 2.0 * dx * dy
                    d_conic[s, 2] += d_q * dy * dy
                    d_mean[s, 0] += -2.0 * d_q * (conic[s, 0] * dx + conic[s, 1] * dy)
                    d_mean[s, 1] += -2.0 * d_q * (conic[s, 1] * dx + conic[s, 2] * dy)
    return d_feats, d_opacity, d_mean, d_conic


@njit(cache=True)
def contribution_counts(offsets, indices, tiles_x, tile_size, width, height,
                        mean2d, conic, opacity):
    """Per pixel: splats visited, splats above the cut-off, and splats hitting the alpha cap."""
    counts = np.zeros((height, width, 3), dtype=np.int64)
    n_tiles = len(offsets) - 1
    for tile in range(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        start = offsets[tile]
        end = offsets[tile + 1]
        for py in range(ty * tile_size, min((ty + 1) * tile_size, height)):
            for px in range(tx * tile_size, min((tx + 1) * tile_size, width)):
                x = px + 0.5
                y = py + 0.5
                T = 1.0
                j = start
                while j < end and T >= T_MIN:
                    s = indices[j]
                    dx = x - mean2d[s, 0]
                    dy = y - mean2d[s, 1]
                    q = conic[s, 0] * dx * dx + 2.0 * conic[s, 1] * dx * dy + conic[s, 2] * dy * dy
                    alpha = opacity[s] * np.exp(-0.5 * q)
                    if alpha >= ALPHA_MIN:
                        counts[py, px, 1] += 1
                        if alpha > ALPHA_MAX:
                            counts[py, px, 2] += 1
                            alpha = ALPHA_MAX
                        T *= 1.0 - alpha
                    j += 1
                counts[py, px, 0] = j - start
    return counts
