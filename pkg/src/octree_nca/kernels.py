"""Compiled per-cell arithmetic shared by both engines.

Grids are viewed as ``(H, W, D, C)`` with ``D = 1`` for 2D input. Every dot
product accumulates in ascending input index into an element of a typed
array, so float32 runs round exactly like elementwise numpy and the two
engines produce bit-identical states.
"""
from __future__ import annotations

import numba as nb
import numpy as np

from .rng import cell_uniform, step_key


def neighbour_offsets(dim: int) -> np.ndarray:
    """``(3**dim, 3)`` offsets in the row-major order of the flattened kernel."""
    rng = (-1, 0, 1)
    if dim == 2:
        offs = [(a, b, 0) for a in rng for b in rng]
    else:
        offs = [(a, b, c) for a in rng for b in rng for c in rng]
    return np.array(offs, dtype=np.int64)


def as4d(data: np.ndarray) -> np.ndarray:
    return data[:, :, None, :] if data.ndim == 3 else data


# --- layer-wise kernels (reference engine) ---------------------------------


@nb.njit(parallel=True, cache=True)
def conv_padded(padded, conv, offsets, pz, out):
    """Depthwise conv of a zero-padded ``(H+2, W+2, D+2pz, C)`` grid into ``out (N, C)``."""
    H, W, D = padded.shape[0] - 2, padded.shape[1] - 2, padded.shape[2] - 2 * pz
    C = padded.shape[3]
    K = offsets.shape[0]
    for cell in nb.prange(H * W * D):
        x = cell // (W * D)
        y = (cell // D) % W
        z = cell % D
        for c in range(C):
            out[cell, c] = 0
        for j in range(K):
            px = x + 1 + offsets[j, 0]
            py = y + 1 + offsets[j, 1]
            pzz = z + pz + offsets[j, 2]
            for c in range(C):
                out[cell, c] += conv[c, j] * padded[px, py, pzz, c]


@nb.njit(parallel=True, cache=True)
def linear(x, w, out):
    """``out[n, o] = sum_i x[n, i] * w[i, o]`` accumulated in ascending ``i``."""
    N, I = x.shape
    O = w.shape[1]
    for n in nb.prange(N):
        for o in range(O):
            out[n, o] = 0
        for i in range(I):
            xi = x[n, i]
            for o in range(O):
                out[n, o] += xi * w[i, o]


@nb.njit(parallel=True, cache=True)
def bias_relu(z, b, out):
    N, O = z.shape
    for n in nb.prange(N):
        for o in range(O):
            v = z[n, o] + b[o]
            out[n, o] = v if v > 0 else 0


@nb.njit(parallel=True, cache=True)
def bias_only(z, b):
    N, O = z.shape
    for n in nb.prange(N):
        for o in range(O):
            z[n, o] = z[n, o] + b[o]


# --- fused cell-oriented kernel --------------------------------------------


@nb.njit(parallel=True, cache=True)
def fused_step(front, back, conv, w1, b1, w2, offsets, n_img, seed, level, step, rate, scratch):
    """One NCA step, one cell at a time.

    ``front``/``back`` are ``(H, W, D, C)``; ``scratch`` is ``(workers, 2C + hidden)``
    and is the only place per-cell intermediates live. Cells are split into
    one contiguous chunk per scratch row.
    """
    H, W, D, C = front.shape
    K = offsets.shape[0]
    HID = b1.shape[0]
    N = H * W * D
    workers = scratch.shape[0]
    key = step_key(seed, level, step)
    chunk = (N + workers - 1) // workers
    for wk in nb.prange(workers):
        v = scratch[wk, : 2 * C]
        h = scratch[wk, 2 * C :]
        lo = wk * chunk
        hi = min(N, lo + chunk)
        for cell in range(lo, hi):
            x = cell // (W * D)
            y = (cell // D) % W
            z = cell % D
            if not cell_uniform(key, cell) < rate:
                for c in range(C):
                    back[x, y, z, c] = front[x, y, z, c]
                continue
            for c in range(C):
                v[c] = front[x, y, z, c]
                v[C + c] = 0
            for j in range(K):
                nx = x + offsets[j, 0]
                ny = y + offsets[j, 1]
                nz = z + offsets[j, 2]
                if nx < 0 or nx >= H or ny < 0 or ny >= W or nz < 0 or nz >= D:
                    continue
                for c in range(C):
                    v[C + c] += conv[c, j] * front[nx, ny, nz, c]
            for o in range(HID):
                h[o] = 0
            for i in range(2 * C):
                vi = v[i]
                for o in range(HID):
                    h[o] += vi * w1[i, o]
            for o in range(HID):
                t = h[o] + b1[o]
                h[o] = t if t > 0 else 0
            # perception half of v is dead; reuse it for the update
            for c in range(C):
                v[C + c] = 0
            for o in range(HID):
                ho = h[o]
                for c in range(C):
                    v[C + c] += ho * w2[o, c]
            for c in range(n_img):
                back[x, y, z, c] = front[x, y, z, c]
            for c in range(n_img, C):
                back[x, y, z, c] = front[x, y, z, c] + v[C + c]
