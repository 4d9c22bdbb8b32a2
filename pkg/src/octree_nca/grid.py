"""Dense multi-channel cell grids and the resampling primitives of the pyramid.

A grid stores its cells as an array of shape ``(*dims, channels)`` with the
channel axis innermost, so every cell's vector is contiguous in memory.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import prod
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class GridShape:
    dims: tuple[int, ...]
    channels: int

    def __post_init__(self):
        if not 2 <= len(self.dims) <= 3:
            raise ValueError(f"grids are 2D or 3D, got dims={self.dims}")
        if any(int(d) < 1 for d in self.dims):
            raise ValueError(f"extents must be positive, got {self.dims}")
        if self.channels < 1:
            raise ValueError(f"channels must be positive, got {self.channels}")

    @property
    def cells(self) -> int:
        return prod(self.dims)


@dataclass(frozen=True, eq=False)
class CellGrid:
    """A 2D or 3D grid of cells; the first ``image_channels`` hold the input image."""

    data: np.ndarray
    image_channels: int = 0

    def __post_init__(self):
        data = self.data
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        data = np.ascontiguousarray(data)
        object.__setattr__(self, "data", data)
        GridShape(tuple(data.shape[:-1]), data.shape[-1])
        if not 0 <= self.image_channels <= data.shape[-1]:
            raise ValueError(
                f"image_channels={self.image_channels} outside [0, {data.shape[-1]}]"
            )

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.data.shape[:-1])

    @property
    def channels(self) -> int:
        return self.data.shape[-1]

    @property
    def ndim(self) -> int:
        return self.data.ndim - 1

    @property
    def shape(self) -> GridShape:
        return GridShape(self.dims, self.channels)

    @property
    def cells(self) -> int:
        return prod(self.dims)

    def with_data(self, data: np.ndarray) -> "CellGrid":
        return CellGrid(data, self.image_channels)

    def image(self) -> np.ndarray:
        return self.data[..., : self.image_channels]


def _as_factors(factors: Sequence[int], ndim: int) -> tuple[int, ...]:
    factors = tuple(int(f) for f in factors)
    if len(factors) != ndim:
        raise ValueError(f"need {ndim} axis factors, got {factors}")
    if any(f not in (1, 2) for f in factors):
        raise ValueError(f"axis factors must be 1 or 2, got {factors}")
    return factors


def seed_from_image(image: CellGrid, total_channels: int) -> CellGrid:
    """Embed an ``n``-channel image into a ``total_channels`` state, zeros elsewhere."""
    n = image.channels
    if total_channels < n:
        raise ValueError(f"total_channels={total_channels} < image channels {n}")
    data = np.zeros(image.dims + (total_channels,), dtype=image.data.dtype)
    data[..., :n] = image.data
    return CellGrid(data, n)


def downsampled_extents(dims: Sequence[int], factors: Sequence[int]) -> tuple[int, ...]:
    return tuple(-(-d // f) for d, f in zip(dims, factors))


def avg_downsample(grid: CellGrid, factors: Sequence[int]) -> CellGrid:
    """Mean-pool each ``factors`` block; odd extents are edge-padded first."""
    factors = _as_factors(factors, grid.ndim)
    if all(f == 1 for f in factors):
        return grid.with_data(grid.data.copy())
    out_dims = downsampled_extents(grid.dims, factors)
    pad = [(0, o * f - d) for o, f, d in zip(out_dims, factors, grid.dims)] + [(0, 0)]
    data = np.pad(grid.data, pad, mode="edge") if any(p[1] for p in pad) else grid.data
    blocked = []
    for o, f in zip(out_dims, factors):
        blocked += [o, f]
    data = data.reshape(blocked + [grid.channels])
    out = data.mean(axis=tuple(range(1, 2 * grid.ndim, 2)), dtype=np.float64)
    return grid.with_data(out.astype(grid.data.dtype))


def _check_upsample_target(dims, factors, target_dims):
    if len(target_dims) != len(dims):
        raise ValueError(f"target {target_dims} has wrong rank for {dims}")
    for d, f, t in zip(dims, factors, target_dims):
        if not d * f - f + 1 <= t <= d * f:
            raise ValueError(
                f"target extent {t} inconsistent with extent {d} and factor {f}"
            )


def upsample_array(data: np.ndarray, factors: Sequence[int], target_dims: Sequence[int]) -> np.ndarray:
    """Nearest-neighbour upsampling of a ``(*dims, C)`` array: out[i] = src[i // f]."""
    out = data
    for axis, (f, t) in enumerate(zip(factors, target_dims)):
        if f != 1:
            out = np.repeat(out, f, axis=axis)
        out = out[(slice(None),) * axis + (slice(0, t),)]
    return np.ascontiguousarray(out)


def upsample_backward(grad: np.ndarray, factors: Sequence[int], source_dims: Sequence[int]) -> np.ndarray:
    """Adjoint of :func:`upsample_array`: sums each replicated block back onto its source cell."""
    out = grad
    for axis, (f, d) in enumerate(zip(factors, source_dims)):
        if f == 1:
            continue
        t = out.shape[axis]
        pad = [(0, 0)] * out.ndim
        pad[axis] = (0, d * f - t)
        out = np.pad(out, pad)
        shape = list(out.shape)
        shape[axis : axis + 1] = [d, f]
        out = out.reshape(shape).sum(axis=axis + 1)
    return out


def nn_upsample(grid: CellGrid, factors: Sequence[int], target_dims: Sequence[int]) -> CellGrid:
    factors = _as_factors(factors, grid.ndim)
    target_dims = tuple(int(t) for t in target_dims)
    _check_upsample_target(grid.dims, factors, target_dims)
    return grid.with_data(upsample_array(grid.data, factors, target_dims))


def _window(origin, size, dims):
    if len(origin) != len(dims) or len(size) != len(dims):
        raise ValueError("origin/size rank does not match grid")
    for o, s, d in zip(origin, size, dims):
        if o < 0 or s < 1 or o + s > d:
            raise ValueError(f"window origin={tuple(origin)} size={tuple(size)} outside {dims}")
    return tuple(slice(o, o + s) for o, s in zip(origin, size))


def crop_patch(grid: CellGrid, origin: Sequence[int], size: Sequence[int]) -> CellGrid:
    window = _window(tuple(origin), tuple(size), grid.dims)
    return grid.with_data(grid.data[window].copy())


def crop_backward(grad: np.ndarray, origin: Sequence[int], full_dims: Sequence[int]) -> np.ndarray:
    """Adjoint of cropping: place ``grad`` in a zero grid of ``full_dims``."""
    out = np.zeros(tuple(full_dims) + grad.shape[-1:], dtype=grad.dtype)
    out[_window(tuple(origin), grad.shape[:-1], tuple(full_dims))] = grad
    return out
