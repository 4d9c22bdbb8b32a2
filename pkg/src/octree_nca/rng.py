"""Stateless fire decisions.

Whether a cell applies its update at a step is a pure function of
``(seed, level, step, cell)``, built from the SplitMix64 finalizer. Both
engines call :func:`fire_uniform`, so they see the same masks without
sharing any generator state.
"""
from __future__ import annotations

import numba as nb
import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S40 = np.uint64(40)
_INV24 = 1.0 / (1 << 24)

MASK64 = (1 << 64) - 1


@nb.njit(cache=True, inline="always")
def splitmix(z):
    z = z + GOLDEN
    z = (z ^ (z >> _S30)) * MIX1
    z = (z ^ (z >> _S27)) * MIX2
    return z ^ (z >> _S31)


@nb.njit(cache=True, inline="always")
def step_key(seed, level, step):
    """Per-(level, step) key; computed once per step, then mixed with each cell."""
    return splitmix(np.uint64(seed) ^ splitmix(np.uint64(level) * GOLDEN + np.uint64(step)))


@nb.njit(cache=True, inline="always")
def cell_uniform(key, cell):
    h = splitmix(key ^ splitmix(np.uint64(cell) * MIX1))
    return float(h >> _S40) * _INV24


@nb.njit(cache=True)
def fire_uniform(seed, level, step, cell):
    return cell_uniform(step_key(seed, level, step), cell)


@nb.njit(cache=True)
def _fire_mask(seed, level, step, n_cells, rate, out):
    key = step_key(seed, level, step)
    for i in range(n_cells):
        out[i] = cell_uniform(key, i) < rate


def fire_mask(seed: int, level: int, step: int, n_cells: int, rate: float) -> np.ndarray:
    """Boolean fire decision for cells ``0 .. n_cells-1`` (flat row-major index)."""
    out = np.empty(n_cells, dtype=np.bool_)
    _fire_mask(np.uint64(seed & MASK64), level, step, n_cells, float(rate), out)
    return out


def fire_uniform_py(seed: int, level: int, step: int, cell: int) -> float:
    """Pure-Python twin of :func:`fire_uniform` on arbitrary-precision ints."""

    def mix(z):
        z = (z + 0x9E3779B97F4A7C15) & MASK64
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    key = mix((seed & MASK64) ^ mix((level * 0x9E3779B97F4A7C15 + step) & MASK64))
    h = mix(key ^ mix((cell * 0xBF58476D1CE4E5B9) & MASK64))
    return (h >> 40) / float(1 << 24)
