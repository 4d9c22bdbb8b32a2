"""Layer-wise NCA forward pass, backpropagation through rollouts, and a
finite-difference gradient oracle.

The forward pass materialises every layer output for the whole grid
(padded input, perception, concatenation, hidden activations, update), as
a framework implementation would. It is the semantic ground truth for the
fused engine and the only engine used for training.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .grid import CellGrid
from .memory import MemoryTracker, NullTracker
from .model import NcaWeights
from .rng import fire_mask as _fire_mask


@dataclass
class RolloutTape:
    """Per-step intermediates recorded in training mode."""

    weights: NcaWeights
    image_channels: int
    dims: tuple[int, ...]
    states: list[np.ndarray] = field(default_factory=list)  # (N, C) inputs per step
    preacts: list[np.ndarray] = field(default_factory=list)  # (N, hidden) linear1 + bias
    masks: list[np.ndarray] = field(default_factory=list)  # (N,) bool

    def __len__(self):
        return len(self.states)


def _check(state: CellGrid, w: NcaWeights):
    if state.channels != w.channels:
        raise ValueError(f"state has {state.channels} channels, weights expect {w.channels}")
    if 3 ** state.ndim != w.kernel_size:
        raise ValueError(f"{state.ndim}D state with a {w.kernel_size}-tap kernel")


def _step(s4, w, mask, n_img, tracker, tape=None):
    """Advance the ``(H, W, D, C)`` array ``s4`` by one step; returns the new array."""
    H, W, D, C = s4.shape
    N = H * W * D
    dt = s4.dtype
    pz = 1 if w.kernel_size == 27 else 0
    offsets = kernels.neighbour_offsets(2 if pz == 0 else 3)

    padded = tracker.alloc("input_padded", (H + 2, W + 2, D + 2 * pz, C), dt, zero=True)
    padded[1:-1, 1:-1, pz : pz + D] = s4
    perception = tracker.alloc("perception", (N, C), dt)
    kernels.conv_padded(padded, w.conv, offsets, pz, perception)
    tracker.release(padded)

    concat = tracker.alloc("concat", (N, 2 * C), dt)
    concat[:, :C] = s4.reshape(N, C)
    concat[:, C:] = perception
    hidden = tracker.alloc("hidden", (N, w.hidden), dt)
    kernels.linear(concat, w.w1, hidden)
    if tape is not None:
        kernels.bias_only(hidden, w.b1)
        tape.preacts.append(hidden.copy())
        np.maximum(hidden, 0, out=hidden)
    else:
        kernels.bias_relu(hidden, w.b1, hidden)
    tracker.release(perception, concat)

    delta = tracker.alloc("delta", (N, C), dt)
    kernels.linear(hidden, w.w2, delta)
    tracker.release(hidden)

    fired = tracker.alloc("fire_mask", (N,), np.bool_)
    fired[:] = mask
    out = tracker.alloc("state", (H, W, D, C), dt, kind="persistent")
    out[...] = s4
    flat_out = out.reshape(N, C)
    flat_in = s4.reshape(N, C)
    flat_out[fired, n_img:] = flat_in[fired, n_img:] + delta[fired, n_img:]
    tracker.release(delta, fired)
    return out


def nca_step_reference(state: CellGrid, w: NcaWeights, fire_mask: np.ndarray, tracker: MemoryTracker | None = None) -> CellGrid:
    _check(state, w)
    mask = np.asarray(fire_mask, dtype=bool)
    if mask.shape != state.dims:
        raise ValueError(f"fire mask {mask.shape} does not match grid {state.dims}")
    w = w.astype(state.data.dtype)
    tracker = tracker or NullTracker()
    out = _step(kernels.as4d(state.data), w, mask.ravel(), state.image_channels, tracker)
    return state.with_data(out.reshape(state.data.shape))


def rollout_reference(
    state: CellGrid,
    w: NcaWeights,
    steps: int,
    seed: int = 0,
    level: int = 0,
    fire_rate: float = 0.5,
    start_step: int = 0,
    record: bool = False,
    tracker: MemoryTracker | None = None,
) -> tuple[CellGrid, RolloutTape | None]:
    """Apply ``steps`` steps; step ``t`` uses the fire mask of index ``start_step + t``."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    _check(state, w)
    dt = state.data.dtype
    w = w.astype(dt)
    tracker = tracker or NullTracker()
    for a in w.arrays():
        tracker.adopt("weights", a)
    tape = RolloutTape(w, state.image_channels, state.dims) if record else None

    cur = tracker.alloc("state", kernels.as4d(state.data).shape, dt, kind="persistent")
    cur[...] = kernels.as4d(state.data)
    N = state.cells
    for t in range(steps):
        mask = _fire_mask(seed, level, start_step + t, N, fire_rate)
        if tape is not None:
            tape.states.append(cur.reshape(N, -1).copy())
            tape.masks.append(mask)
        nxt = _step(cur, w, mask, state.image_channels, tracker, tape)
        tracker.release(cur)
        cur = nxt
    result = state.with_data(cur.reshape(state.data.shape).copy())
    tracker.release(cur)
    tracker.release(*w.arrays())
    return result, tape


# --- backward --------------------------------------------------------------


def _pad4(a4, pz):
    return np.pad(a4, ((1, 1), (1, 1), (pz, pz), (0, 0)))


def _shifted(p4, off, dims, pz):
    H, W, D = dims
    ox, oy, oz = off
    return p4[1 + ox : 1 + ox + H, 1 + oy : 1 + oy + W, pz + oz : pz + oz + D]


def backward_rollout(tape: RolloutTape, grad_output: np.ndarray) -> tuple[NcaWeights, np.ndarray]:
    """Gradients of a scalar loss w.r.t. the weights and the rollout's input state.

    ``grad_output`` is dL/d(final state), shaped like the grid data. Fire
    masks act as constant multipliers; the clamped image channels pass no
    gradient.
    """
    w = tape.weights
    C, n_img = w.channels, tape.image_channels
    dims = tape.dims
    dims3 = dims if len(dims) == 3 else dims + (1,)
    if grad_output.shape != dims + (C,):
        raise ValueError(f"gradient shape {grad_output.shape} does not match tape grid {dims + (C,)}")
    if not (len(tape.states) == len(tape.preacts) == len(tape.masks)):
        raise ValueError("corrupt tape: per-step records disagree in length")
    dt = grad_output.dtype
    pz = 1 if w.kernel_size == 27 else 0
    offsets = kernels.neighbour_offsets(len(dims))
    N = int(np.prod(dims))

    g_conv = np.zeros_like(w.conv, dtype=dt)
    g_w1 = np.zeros_like(w.w1, dtype=dt)
    g_b1 = np.zeros_like(w.b1, dtype=dt)
    g_w2 = np.zeros_like(w.w2, dtype=dt)

    g = grad_output.reshape(N, C).astype(dt, copy=True)
    for t in reversed(range(len(tape))):
        s = tape.states[t]
        z = tape.preacts[t]
        m = tape.masks[t]
        h = np.maximum(z, 0)

        g_delta = np.zeros_like(g)
        g_delta[m, n_img:] = g[m, n_img:]
        g_w2 += h.T @ g_delta
        g_z = (g_delta @ w.w2.T) * (z > 0)
        g_b1 += g_z.sum(axis=0)
        s4p = _pad4(s.reshape(dims3 + (C,)), pz)
        perception = np.zeros((N, C), dt)
        for j, off in enumerate(offsets):
            perception += w.conv[:, j] * _shifted(s4p, off, dims3, pz).reshape(N, C)
        v = np.concatenate([s, perception], axis=1)
        g_w1 += v.T @ g_z
        g_v = g_z @ w.w1.T

        g_p4p = _pad4(g_v[:, C:].reshape(dims3 + (C,)), pz)
        g_s = g_v[:, :C].copy()
        g_s[:, n_img:] += g[:, n_img:]
        g_p = g_v[:, C:]
        for j, off in enumerate(offsets):
            g_conv[:, j] += (g_p * _shifted(s4p, off, dims3, pz).reshape(N, C)).sum(axis=0)
            neg = tuple(-o for o in off)
            g_s += w.conv[:, j] * _shifted(g_p4p, neg, dims3, pz).reshape(N, C)
        g = g_s

    g[:, :n_img] = 0
    return NcaWeights(g_conv, g_w1, g_b1, g_w2), g.reshape(dims + (C,))


# --- finite-difference oracle ----------------------------------------------


def central_difference(
    fn: Callable[[np.ndarray], tuple[float, np.ndarray | None]],
    theta: np.ndarray,
    epsilon: float = 1e-3,
    min_epsilon: float = 1e-7,
) -> np.ndarray:
    """Central differences of ``fn`` at ``theta``.

    ``fn`` returns ``(loss, pattern)`` where ``pattern`` is the ReLU activity
    of the run (or None). A probe whose pattern differs from the base run has
    stepped across a kink, where a difference quotient does not estimate the
    derivative; that coordinate is retried with a step ten times smaller.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    _, base_pattern = fn(theta)
    grads = np.zeros_like(theta)
    for k in range(theta.size):
        eps = epsilon
        while True:
            plus, minus = theta.copy(), theta.copy()
            plus[k] += eps
            minus[k] -= eps
            lp, pp = fn(plus)
            lm, pm = fn(minus)
            crossed = base_pattern is not None and not (
                np.array_equal(pp, base_pattern) and np.array_equal(pm, base_pattern)
            )
            if not crossed or eps / 10 < min_epsilon:
                break
            eps /= 10
        grads[k] = (lp - lm) / (2 * eps)
    return grads


def relu_pattern(tape: RolloutTape) -> np.ndarray:
    return np.concatenate([z.ravel() > 0 for z in tape.preacts]) if tape.preacts else np.zeros(0, bool)


def finite_diff_grad(
    state: CellGrid,
    w: NcaWeights,
    steps: int,
    seed: int,
    loss_fn: Callable[[CellGrid], float],
    epsilon: float = 1e-3,
    level: int = 0,
    fire_rate: float = 0.5,
) -> NcaWeights:
    """Central differences of ``loss_fn(rollout(state))`` w.r.t. every weight.

    Runs in float64; both probes of a coordinate reuse the same fire masks.
    """
    base = w.astype(np.float64)
    state = state.with_data(state.data.astype(np.float64))
    dim, C, hid = base.dim, base.channels, base.hidden

    def loss_at(theta):
        ww = NcaWeights.from_flat(theta, dim, C, hid)
        out, tape = rollout_reference(state, ww, steps, seed, level, fire_rate, record=True)
        return loss_fn(out), relu_pattern(tape)

    grads = central_difference(loss_at, base.flat(), epsilon)
    return NcaWeights.from_flat(grads, dim, C, hid)
