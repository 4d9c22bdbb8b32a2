"""Runtime and memory scaling of the two engines."""
from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fused import FusedEngine
from .grid import CellGrid, seed_from_image
from .memory import MemoryTracker
from .model import NcaWeights
from .reference import rollout_reference

CSV_COLUMNS = ("engine", "cells", "seconds", "peak_persistent", "peak_transient")
OOM = "OOM"


@dataclass
class BenchRecord:
    engine: str
    cells: int
    seconds: float | str
    peak_persistent: int | str
    peak_transient: int | str

    def row(self) -> list[str]:
        return [self.engine, str(self.cells)] + [
            v if isinstance(v, str) else repr(v) for v in (self.seconds, self.peak_persistent, self.peak_transient)
        ]


def parse_size(text: str) -> tuple[int, ...]:
    """``"256"`` is a square, ``"64x64x8"`` gives explicit extents."""
    parts = tuple(int(p) for p in text.lower().split("x"))
    if len(parts) == 1:
        parts = parts * 2
    if not 2 <= len(parts) <= 3 or any(p < 1 for p in parts):
        raise ValueError(f"bad size {text!r}")
    return parts


def run_engine(engine: str, state: CellGrid, w: NcaWeights, steps: int, seed: int = 0,
               workers: int = 1, budget_floats: int | None = None, fire_rate: float = 0.5):
    """One rollout under a fresh tracker; returns (seconds, report)."""
    tracker = MemoryTracker(state.cells, keep_log=False, budget_floats=budget_floats)
    t0 = time.perf_counter()
    if engine == "fused":
        FusedEngine.for_weights(w, workers).rollout(state, w, steps, seed, 0, fire_rate, tracker=tracker)
    elif engine == "reference":
        rollout_reference(state, w, steps, seed, 0, fire_rate, tracker=tracker)
    else:
        raise ValueError(f"unknown engine {engine!r}")
    seconds = time.perf_counter() - t0
    return seconds, tracker.finish().report()


def bench_scaling(w: NcaWeights, engines: Sequence[str], sizes: Sequence[Sequence[int]],
                  repetitions: int = 3, steps: int = 10, image_channels: int = 1, seed: int = 0,
                  workers: int = 1, budget_floats: int | None = None) -> list[BenchRecord]:
    """Median wall time and instrumented peaks per (engine, size).

    Every run is one single-level rollout of ``steps`` steps on a random
    image. A run that exceeds ``budget_floats`` is recorded as ``OOM``.
    """
    cells = [int(np.prod(s)) for s in sizes]
    if cells != sorted(cells):
        raise ValueError("sizes must be ascending")
    rng = np.random.default_rng(seed)
    records = []
    for engine in engines:
        for size in sizes:
            size = tuple(size)
            image = CellGrid(rng.random(size + (image_channels,), dtype=np.float32), image_channels)
            state = seed_from_image(image, w.channels)
            # one untimed run compiles the kernels for this shape class
            times, report = [], None
            try:
                run_engine(engine, state, w, 1, seed, workers, budget_floats)
                for _ in range(repetitions):
                    sec, report = run_engine(engine, state, w, steps, seed, workers, budget_floats)
                    times.append(sec)
            except MemoryError:
                records.append(BenchRecord(engine, int(np.prod(size)), OOM, OOM, OOM))
                continue
            records.append(BenchRecord(engine, int(np.prod(size)), statistics.median(times),
                                       report.peak_persistent_floats, report.peak_transient_floats))
    return records


def write_csv(records: Sequence[BenchRecord], fh=None, header: bool = True) -> str:
    buf = fh if fh is not None else io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if header:
        writer.writerow(CSV_COLUMNS)
    for r in records:
        writer.writerow(r.row())
    return buf.getvalue() if fh is None else ""


def linear_fit_r2(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = ((y - y.mean()) ** 2).sum()
    return 1.0 - (resid**2).sum() / ss_tot if ss_tot > 0 else 1.0
