"""OctreeNCA inference: image pyramid, coarse-to-fine rollouts, final mask."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fused import FusedEngine
from .grid import CellGrid, avg_downsample, nn_upsample, seed_from_image
from .memory import MemoryReport, MemoryTracker
from .model import OctreeModel
from .reference import rollout_reference
from .schedule import PyramidSchedule, build_schedule

ENGINES = ("reference", "fused")


@dataclass
class SegmentationResult:
    mask: np.ndarray
    logits: np.ndarray
    schedule: PyramidSchedule
    level_seconds: list[float] = field(default_factory=list)
    memory: MemoryReport | None = None


def schedule_for(model: OctreeModel, extents: Sequence[int]) -> PyramidSchedule:
    s = model.schedule
    return build_schedule(extents, model.num_levels, s.alpha0, s.refine_steps, s.floor)


def build_pyramid(image: CellGrid, schedule: PyramidSchedule) -> list[CellGrid]:
    """Images for every level, coarsest first."""
    if tuple(image.dims) != schedule.levels[-1].extents:
        raise ValueError(f"image extents {image.dims} do not match schedule {schedule.levels[-1].extents}")
    pyramid = [image]
    for lv in reversed(schedule.levels[:-1]):
        pyramid.append(avg_downsample(pyramid[-1], lv.factors))
    pyramid.reverse()
    for img, lv in zip(pyramid, schedule.levels):
        assert img.dims == lv.extents, (img.dims, lv.extents)
    return pyramid


def transfer_state(coarse_state: CellGrid, fine_image: CellGrid, factors: Sequence[int]) -> CellGrid:
    """Nearest-upsample the hidden channels and re-seed the image channels."""
    n = fine_image.channels
    if coarse_state.image_channels != n:
        raise ValueError(f"state carries {coarse_state.image_channels} image channels, image has {n}")
    up = nn_upsample(coarse_state, factors, fine_image.dims)
    data = up.data
    data[..., :n] = fine_image.data
    return CellGrid(data, n)


def logits_to_mask(logits: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Sigmoid threshold for one logit channel, argmax otherwise."""
    if logits.shape[-1] == 1:
        x = logits[..., 0].astype(np.float64)
        e = np.exp(-np.abs(x))
        probs = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (probs > threshold).astype(np.uint8)
    return np.argmax(logits, axis=-1).astype(np.uint8)


def segment(
    image: CellGrid,
    model: OctreeModel,
    engine: str = "fused",
    seed: int | None = None,
    workers: int = 1,
    tracker: MemoryTracker | None = None,
    threshold: float = 0.5,
) -> SegmentationResult:
    """Segment an image of any extents with a trained model.

    The schedule is rebuilt for the actual extents; the weights of level
    ``i`` always run on the ``i``-th resolution counted from the coarsest.
    """
    if engine not in ENGINES:
        raise ValueError(f"unknown engine {engine!r}; expected one of {ENGINES}")
    if image.channels != model.image_channels:
        raise ValueError(f"image has {image.channels} channels, model expects {model.image_channels}")
    if image.ndim != model.dim:
        raise ValueError(f"{image.ndim}D image for a {model.dim}D model")
    seed = model.seed if seed is None else seed
    schedule = schedule_for(model, image.dims)
    pyramid = build_pyramid(image, schedule)
    fused = FusedEngine(model.dim, model.channels, model.hidden, workers) if engine == "fused" else None

    seconds = []
    state = None
    for level, (lv, w, img) in enumerate(zip(schedule.levels, model.levels, pyramid)):
        t0 = time.perf_counter()
        if state is None:
            state = seed_from_image(img, model.channels)
        else:
            state = transfer_state(state, img, schedule.levels[level - 1].factors)
        if fused is not None:
            state = fused.rollout(state, w, lv.steps, seed, level, model.fire_rate, tracker=tracker)
        else:
            state, _ = rollout_reference(state, w, lv.steps, seed, level, model.fire_rate, tracker=tracker)
        seconds.append(time.perf_counter() - t0)

    logits = state.data[..., model.channels - model.num_classes :].copy()
    report = tracker.finish().report() if tracker is not None else None
    return SegmentationResult(logits_to_mask(logits, threshold), logits, schedule, seconds, report)
