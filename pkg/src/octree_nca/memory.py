"""Instrumented allocation for the inference engines.

Engines allocate every grid-sized buffer through a :class:`MemoryTracker`
and hand it back with :meth:`MemoryTracker.release`. Element counts are
tracked in two pools: *persistent* (state buffers, weights) and *transient*
(layer outputs, per-worker scratch). Peaks are measured, not estimated.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InvalidState(RuntimeError):
    pass


@dataclass(frozen=True)
class MemoryReport:
    cells: int
    peak_persistent_floats: int
    peak_transient_floats: int
    peak_total_floats: int
    peak_transient_floats_per_cell: float
    log: list = field(default_factory=list, repr=False)

    @property
    def persistent_per_cell(self) -> float:
        return self.peak_persistent_floats / self.cells if self.cells else 0.0

    @property
    def total_per_cell(self) -> float:
        return self.peak_total_floats / self.cells if self.cells else 0.0


class MemoryTracker:
    def __init__(self, cells: int = 0, keep_log: bool = True, budget_floats: int | None = None):
        self.cells = cells
        self.budget_floats = budget_floats
        self.keep_log = keep_log
        self.live = {"persistent": 0, "transient": 0}
        self.peak = {"persistent": 0, "transient": 0}
        self.peak_total = 0
        self.log: list[tuple[str, str, int, int, int]] = []
        self._owned: dict[int, tuple[str, int, str]] = {}
        self._finished = False
        # set by engines whose transients are per-worker rather than per-grid
        self.scratch_per_cell: int | None = None

    def _bump(self, kind: str, n: int, name: str, event: str):
        self.live[kind] += n
        self.peak[kind] = max(self.peak[kind], self.live[kind])
        total = self.live["persistent"] + self.live["transient"]
        self.peak_total = max(self.peak_total, total)
        if self.keep_log:
            self.log.append((name, event, n, self.live["persistent"], self.live["transient"]))

    def alloc(self, name: str, shape, dtype=np.float32, kind: str = "transient", zero: bool = False) -> np.ndarray:
        if kind not in self.live:
            raise ValueError(f"unknown pool {kind!r}")
        n = int(np.prod(shape))
        if self.budget_floats is not None and self.live["persistent"] + self.live["transient"] + n > self.budget_floats:
            raise MemoryError(f"allocating {name} ({n} floats) exceeds the budget of {self.budget_floats}")
        arr = np.zeros(shape, dtype) if zero else np.empty(shape, dtype)
        self._owned[id(arr)] = (kind, arr.size, name)
        self._bump(kind, arr.size, name, "alloc")
        return arr

    def adopt(self, name: str, arr: np.ndarray, kind: str = "persistent") -> np.ndarray:
        """Account for an array that was created elsewhere (e.g. weights)."""
        self._owned[id(arr)] = (kind, arr.size, name)
        self._bump(kind, arr.size, name, "adopt")
        return arr

    def release(self, *arrays: np.ndarray):
        for arr in arrays:
            kind, n, name = self._owned.pop(id(arr))
            self._bump(kind, -n, name, "free")

    def finish(self) -> "MemoryTracker":
        self._finished = True
        return self

    def report(self) -> MemoryReport:
        if not self._finished:
            raise InvalidState("memory report requested before the run completed")
        if self.scratch_per_cell is not None:
            per_cell = self.scratch_per_cell
        else:
            per_cell = self.peak["transient"] / self.cells if self.cells else 0.0
        return MemoryReport(
            cells=self.cells,
            peak_persistent_floats=self.peak["persistent"],
            peak_transient_floats=self.peak["transient"],
            peak_total_floats=self.peak_total,
            peak_transient_floats_per_cell=per_cell,
            log=list(self.log),
        )


class NullTracker(MemoryTracker):
    """Allocator with the tracker interface but no bookkeeping."""

    def alloc(self, name, shape, dtype=np.float32, kind="transient", zero=False):
        return np.zeros(shape, dtype) if zero else np.empty(shape, dtype)

    def adopt(self, name, arr, kind="persistent"):
        return arr

    def release(self, *arrays):
        pass


def memory_report(tracker: MemoryTracker) -> MemoryReport:
    return tracker.report()
