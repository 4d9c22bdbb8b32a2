"""Analytic gradients against central finite differences."""
from __future__ import annotations

import numpy as np

from .grid import CellGrid
from .model import OctreeModel
from .reference import central_difference
from .training import Sample, pyramid_relu_pattern, sample_loss, sample_loss_and_grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    a, n = np.abs(analytic), np.abs(numeric)
    return float((np.abs(analytic - numeric) / np.maximum(np.maximum(a, n), floor)).max())


def gradcheck_instance(seed: int, extents=(8, 8), levels: int = 2, channels: int = 8, hidden: int = 16,
                       refine_steps: int = 3, lambda_dice: float = 1.0):
    """A small model with non-zero output layers, a random image and a random mask."""
    rng = np.random.default_rng([seed, 7])
    model = OctreeModel.create(extents, levels, 1, 1, channels, hidden, refine_steps=refine_steps,
                               floor=1, seed=seed)
    for w in model.levels:
        w.w2[...] = rng.normal(0, 0.3, w.w2.shape)
        w.b1[...] = rng.normal(0, 0.1, w.b1.shape)
    model = model.with_flat(model.flat().astype(np.float64))
    image = CellGrid(rng.random(tuple(extents) + (1,)), 1)
    mask = (rng.random(tuple(extents)) > 0.5).astype(np.uint8)
    return model, Sample(image, mask), lambda_dice


def pyramid_gradcheck(seed: int, epsilon: float = 1e-3, **kwargs) -> float:
    """Max relative error of backprop through the full pyramid for one seed."""
    model, sample, lam = gradcheck_instance(seed, **kwargs)
    _, analytic, _ = sample_loss_and_grad(model, sample, seed, lam, dtype=np.float64)

    def fn(theta):
        loss, records = sample_loss(model.with_flat(theta), sample, seed, lam, dtype=np.float64)
        return loss, pyramid_relu_pattern(records)

    numeric = central_difference(fn, model.flat(), epsilon)
    return max_relative_error(analytic, numeric)
