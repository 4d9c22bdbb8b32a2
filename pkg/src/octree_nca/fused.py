"""Cell-oriented fused inference.

A whole NCA step is computed per cell in one pass. The only grid-sized
allocations are the two state buffers; every intermediate (state copy,
perception, hidden activations, update) lives in a per-worker scratch row
of ``2C + hidden`` floats.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .grid import CellGrid
from .memory import MemoryTracker, NullTracker
from .model import NcaWeights
from .rng import MASK64


@dataclass
class DoubleBuffer:
    """Front is read, back is written; :meth:`swap` between steps."""

    front: np.ndarray
    back: np.ndarray

    def __post_init__(self):
        if self.front.shape != self.back.shape or self.front is self.back:
            raise ValueError("double buffer needs two distinct arrays of one shape")

    def swap(self):
        self.front, self.back = self.back, self.front


class FusedEngine:
    """Fused inference engine fixed to one ``(dim, channels, hidden)`` configuration.

    ``workers`` is the number of cell partitions, each with its own scratch
    row; numba maps partitions onto its thread pool.
    """

    def __init__(self, dim: int, channels: int = 16, hidden: int = 64, workers: int = 1):
        if dim not in (2, 3) or channels < 1 or hidden < 1 or workers < 1:
            raise ValueError(f"invalid engine config dim={dim} C={channels} hidden={hidden} workers={workers}")
        self.dim = dim
        self.channels = channels
        self.hidden = hidden
        self.workers = workers
        self.offsets = kernels.neighbour_offsets(dim)

    @property
    def scratch_floats(self) -> int:
        return 2 * self.channels + self.hidden

    @classmethod
    def for_weights(cls, w: NcaWeights, workers: int = 1) -> "FusedEngine":
        return cls(w.dim, w.channels, w.hidden, workers)

    def _check(self, w: NcaWeights, shape: tuple[int, ...]):
        if (w.dim, w.channels, w.hidden) != (self.dim, self.channels, self.hidden):
            raise ValueError(
                f"weights (dim={w.dim}, C={w.channels}, hidden={w.hidden}) do not match engine "
                f"(dim={self.dim}, C={self.channels}, hidden={self.hidden})"
            )
        if len(shape) != self.dim + 1 or shape[-1] != self.channels:
            raise ValueError(f"grid shape {shape} does not match engine")

    def step(self, buffers: DoubleBuffer, w: NcaWeights, n_img: int, seed: int, level: int,
             step: int, fire_rate: float, scratch: np.ndarray):
        """Fill ``buffers.back`` from ``buffers.front`` (no swap)."""
        kernels.fused_step(
            kernels.as4d(buffers.front), kernels.as4d(buffers.back),
            w.conv, w.w1, w.b1, w.w2, self.offsets, n_img,
            np.uint64(seed & MASK64), level, step, float(fire_rate), scratch,
        )

    def rollout(
        self,
        state: CellGrid,
        w: NcaWeights,
        steps: int,
        seed: int = 0,
        level: int = 0,
        fire_rate: float = 0.5,
        start_step: int = 0,
        tracker: MemoryTracker | None = None,
    ) -> CellGrid:
        if steps < 0:
            raise ValueError("steps must be >= 0")
        dt = state.data.dtype
        w = w.astype(dt)
        self._check(w, state.data.shape)
        tracker = tracker or NullTracker()
        for a in w.arrays():
            tracker.adopt("weights", a)
        tracker.scratch_per_cell = self.scratch_floats

        front = tracker.alloc("front", state.data.shape, dt, kind="persistent")
        back = tracker.alloc("back", state.data.shape, dt, kind="persistent")
        front[...] = state.data
        buffers = DoubleBuffer(front, back)
        scratch = tracker.alloc("scratch", (self.workers, self.scratch_floats), dt)
        for t in range(steps):
            self.step(buffers, w, state.image_channels, seed, level, start_step + t, fire_rate, scratch)
            buffers.swap()
        result = state.with_data(buffers.front.copy())
        tracker.release(scratch, front, back)
        tracker.release(*w.arrays())
        return result


def fused_step(buffers: DoubleBuffer, w: NcaWeights, seed: int, level: int, step: int,
               image_channels: int, fire_rate: float = 0.5, workers: int = 1):
    engine = FusedEngine.for_weights(w, workers)
    w = w.astype(buffers.front.dtype)
    engine._check(w, buffers.front.shape)
    scratch = np.empty((workers, engine.scratch_floats), buffers.front.dtype)
    engine.step(buffers, w, image_channels, seed, level, step, fire_rate, scratch)


def fused_rollout(state: CellGrid, w: NcaWeights, steps: int, seed: int = 0, level: int = 0,
                  fire_rate: float = 0.5, workers: int = 1,
                  tracker: MemoryTracker | None = None) -> CellGrid:
    return FusedEngine.for_weights(w, workers).rollout(
        state, w, steps, seed, level, fire_rate, tracker=tracker
    )
