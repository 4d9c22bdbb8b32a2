"""End-to-end training of an :class:`OctreeModel`.

Forward passes run the reference engine in recording mode; gradients are
chained from the finest level back to the coarsest through the crop and
nearest-upsample transfers. Parameters are updated with Adam, an EMA
shadow copy is kept for evaluation, and the learning rate decays once per
epoch.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .grid import CellGrid, crop_backward, seed_from_image, upsample_array, upsample_backward
from .model import OctreeModel, save_model
from .octree import build_pyramid, schedule_for, segment
from .reference import backward_rollout, relu_pattern, rollout_reference

log = logging.getLogger(__name__)

DICE_SMOOTH = 1e-5


class TrainingDiverged(FloatingPointError):
    pass


class NoForeground(ValueError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 1.6e-3
    lr_decay: float = 0.9992
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    ema_alpha: float = 0.99
    lambda_dice: float = 1.0
    batch_size: int = 3
    epochs: int = 200
    batches_per_epoch: int = 200
    # number of finest levels trained on patches, and the finest patch extents
    patch_levels: int = 0
    patch_size: list[int] | None = None
    seed: int = 0
    eval_every: int = 10
    target_dice: float | None = None

    def __post_init__(self):
        if not 0 <= self.lambda_dice <= 2:
            raise ValueError(f"lambda_dice must lie in [0, 2], got {self.lambda_dice}")
        if not 0 <= self.ema_alpha < 1:
            raise ValueError(f"ema_alpha must lie in [0, 1), got {self.ema_alpha}")
        if not 0 < self.lr_decay <= 1:
            raise ValueError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if self.batch_size < 1 or self.epochs < 0 or self.batches_per_epoch < 1:
            raise ValueError("batch_size, batches_per_epoch must be >= 1 and epochs >= 0")
        if self.patch_levels and not self.patch_size:
            raise ValueError("patch_levels > 0 needs patch_size")

    def lr_at(self, epoch: int) -> float:
        return self.lr0 * self.lr_decay**epoch


@dataclass
class Sample:
    image: CellGrid
    mask: np.ndarray
    patient: str = ""


# --- losses ----------------------------------------------------------------


def one_hot(mask: np.ndarray, num_classes: int) -> np.ndarray:
    """Binary tasks keep a single foreground plane; otherwise one plane per class."""
    if num_classes == 1:
        return (mask > 0).astype(np.float64)[..., None]
    return (mask[..., None] == np.arange(num_classes)).astype(np.float64)


def _check_pair(probs, target):
    if probs.shape != target.shape:
        raise ValueError(f"probabilities {probs.shape} and target {target.shape} differ in shape")


def dice_loss(probs: np.ndarray, target: np.ndarray) -> float:
    """Soft Dice loss averaged over the trailing class axis."""
    _check_pair(probs, target)
    axes = tuple(range(probs.ndim - 1))
    inter = (probs * target).sum(axis=axes)
    denom = probs.sum(axis=axes) + target.sum(axis=axes)
    return float(np.mean(1 - (2 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)))


def bce_loss(probs: np.ndarray, target: np.ndarray) -> float:
    """Mean per-cell cross-entropy; sigmoid form for one channel, softmax form otherwise."""
    _check_pair(probs, target)
    p = np.clip(probs, 1e-12, 1 - 1e-12)
    if probs.shape[-1] == 1:
        ce = -(target * np.log(p) + (1 - target) * np.log(1 - p))
    else:
        ce = -(target * np.log(p)).sum(axis=-1)
    return float(ce.mean())


def combined_loss(probs: np.ndarray, target: np.ndarray, lambda_dice: float = 1.0) -> float:
    if not 0 <= lambda_dice <= 2:
        raise ValueError(f"lambda_dice must lie in [0, 2], got {lambda_dice}")
    return (2 - lambda_dice) * bce_loss(probs, target) + lambda_dice * dice_loss(probs, target)


def probabilities(logits: np.ndarray) -> np.ndarray:
    if logits.shape[-1] == 1:
        # exp of a non-positive argument only, so large |logits| cannot overflow
        e = np.exp(-np.abs(logits))
        return np.where(logits >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_grad(logits: np.ndarray, target: np.ndarray, lambda_dice: float = 1.0) -> tuple[float, np.ndarray]:
    """Combined loss of ``logits`` and its gradient with respect to them.

    ``target`` is one-hot with the same shape as ``logits``.
    """
    _check_pair(logits, target)
    x = logits.astype(np.float64)
    p = probabilities(x)
    ncell = int(np.prod(x.shape[:-1]))
    axes = tuple(range(x.ndim - 1))

    if x.shape[-1] == 1:
        # stable log-sigmoid form
        bce = float(np.mean(np.maximum(x, 0) - x * target + np.log1p(np.exp(-np.abs(x)))))
        g_bce = (p - target) / ncell
    else:
        logp = x - x.max(axis=-1, keepdims=True)
        logp = logp - np.log(np.exp(logp).sum(axis=-1, keepdims=True))
        bce = float(-(target * logp).sum(axis=-1).mean())
        g_bce = (p - target) / ncell

    inter = (p * target).sum(axis=axes)
    denom = p.sum(axis=axes) + target.sum(axis=axes)
    num = 2 * inter + DICE_SMOOTH
    den = denom + DICE_SMOOTH
    k = x.shape[-1]
    dice = float(np.mean(1 - num / den))
    g_p = -(2 * target * den - num) / den**2 / k
    if k == 1:
        g_dice = g_p * p * (1 - p)
    else:
        g_dice = p * (g_p - (g_p * p).sum(axis=-1, keepdims=True))

    loss = (2 - lambda_dice) * bce + lambda_dice * dice
    grad = (2 - lambda_dice) * g_bce + lambda_dice * g_dice
    return loss, grad


# --- optimizer -------------------------------------------------------------


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    shadow: np.ndarray
    step: int = 0
    epoch: int = 0
    lr: float = 1.6e-3

    @classmethod
    def start(cls, params: np.ndarray, lr: float) -> "OptimizerState":
        params = params.astype(np.float64)
        return cls(np.zeros_like(params), np.zeros_like(params), params.copy(), 0, 0, lr)


def adam_update(params: np.ndarray, grads: np.ndarray, state: OptimizerState,
                beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8) -> np.ndarray:
    """One bias-corrected Adam step; moments in ``state`` are updated in place."""
    if not np.all(np.isfinite(grads)):
        bad = np.flatnonzero(~np.isfinite(grads))
        raise TrainingDiverged(f"non-finite gradient at {bad.size} parameters (first index {bad[0]})")
    g = grads.astype(np.float64)
    state.step += 1
    state.m = beta1 * state.m + (1 - beta1) * g
    state.v = beta2 * state.v + (1 - beta2) * g * g
    m_hat = state.m / (1 - beta1**state.step)
    v_hat = state.v / (1 - beta2**state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + eps)


def ema_update(shadow: np.ndarray, params: np.ndarray, alpha: float = 0.99) -> np.ndarray:
    if not 0 <= alpha < 1:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    return alpha * shadow + (1 - alpha) * params


# --- patches ---------------------------------------------------------------


@dataclass(frozen=True)
class PatchPlan:
    """Crop windows for the patched levels, keyed by level index."""

    windows: dict[int, tuple[tuple[int, ...], tuple[int, ...]]] = field(default_factory=dict)


def patch_sizes(schedule, patch_levels: int, patch_size: Sequence[int]) -> dict[int, tuple[int, ...]]:
    L = schedule.num_levels
    if not 0 <= patch_levels <= L:
        raise ValueError(f"cannot patch {patch_levels} of {L} levels")
    sizes = {}
    size = tuple(int(s) for s in patch_size)
    for level in range(L - 1, L - 1 - patch_levels, -1):
        ext = schedule.levels[level].extents
        if len(size) != len(ext) or any(s > e for s, e in zip(size, ext)):
            raise ValueError(f"patch {size} does not fit level {level} extents {ext}")
        sizes[level] = size
        if level > L - patch_levels:
            f = schedule.levels[level - 1].factors
            if any(s % k for s, k in zip(size, f)):
                raise ValueError(f"patch {size} not divisible by factors {f}")
            size = tuple(s // k for s, k in zip(size, f))
    return sizes


def sample_patch(mask: np.ndarray, schedule, patch_levels: int, patch_size: Sequence[int],
                 rng: np.random.Generator, max_tries: int = 100) -> PatchPlan:
    """Draw aligned crop windows whose finest mask window contains foreground."""
    if patch_levels == 0:
        return PatchPlan()
    sizes = patch_sizes(schedule, patch_levels, patch_size)
    L = schedule.num_levels
    finest = L - 1
    coarsest = L - patch_levels
    # cumulative factor from the coarsest patched level up to the finest
    align = np.ones(len(patch_size), dtype=int)
    for level in range(coarsest, finest):
        align *= np.array(schedule.levels[level].factors)
    ext = np.array(schedule.levels[finest].extents)
    size = np.array(sizes[finest])
    for _ in range(max_tries):
        hi = (ext - size) // align
        origin = rng.integers(0, hi + 1) * align
        window = tuple(slice(o, o + s) for o, s in zip(origin, size))
        if np.any(mask[window] > 0):
            break
    else:
        raise NoForeground(f"no foreground patch found in {max_tries} draws")
    windows = {}
    o = origin.copy()
    for level in range(finest, coarsest - 1, -1):
        windows[level] = (tuple(int(x) for x in o), sizes[level])
        if level > coarsest:
            o = o // np.array(schedule.levels[level - 1].factors)
    return PatchPlan(windows)


# --- forward / backward through the pyramid ---------------------------------


def _window(origin, size):
    return tuple(slice(o, o + s) for o, s in zip(origin, size))


def pyramid_forward(model: OctreeModel, image: CellGrid, seed: int, plan: PatchPlan | None = None,
                    dtype=np.float32):
    """Training-mode forward; returns the final state and what backward needs."""
    plan = plan or PatchPlan()
    schedule = schedule_for(model, image.dims)
    pyramid = build_pyramid(image.with_data(image.data.astype(dtype)), schedule)
    C = model.channels
    records = []
    state = None
    for level, (lv, w, img) in enumerate(zip(schedule.levels, model.levels, pyramid)):
        win = plan.windows.get(level)
        if win is not None:
            img = img.with_data(img.data[_window(*win)].copy())
        if state is None:
            transfer = None
            data = seed_from_image(img, C).data
        else:
            factors = schedule.levels[level - 1].factors
            prev_win = plan.windows.get(level - 1)
            if win is not None and prev_win is None:
                full = schedule.levels[level].extents
                up = upsample_array(state.data, factors, full)
                data = up[_window(*win)].copy()
                transfer = ("crop", factors, state.dims, full, win[0])
            else:
                data = upsample_array(state.data, factors, img.dims)
                transfer = ("up", factors, state.dims, None, None)
            data[..., : img.channels] = img.data
        state = CellGrid(data, img.channels)
        state, tape = rollout_reference(state, w.astype(dtype), lv.steps, seed, level,
                                        model.fire_rate, record=True)
        records.append((tape, transfer))
    return state, records


def pyramid_backward(records, grad_final: np.ndarray) -> list:
    """Per-level weight gradients, coarsest first."""
    grads = [None] * len(records)
    g = grad_final
    for level in range(len(records) - 1, -1, -1):
        tape, transfer = records[level]
        gw, g = backward_rollout(tape, g)
        grads[level] = gw
        if transfer is not None:
            kind, factors, coarse_dims, full, origin = transfer
            if kind == "crop":
                g = crop_backward(g, origin, full)
            g = upsample_backward(g, factors, coarse_dims)
    return grads


def _finest_target(model, sample, plan):
    mask = sample.mask
    finest = model.num_levels - 1
    if plan is not None and finest in plan.windows:
        mask = mask[_window(*plan.windows[finest])]
    return one_hot(mask, model.num_classes)


def sample_loss(model: OctreeModel, sample: Sample, seed: int, lambda_dice: float,
                plan: PatchPlan | None = None, dtype=np.float32):
    """Forward-only loss of one sample, with the recorded per-level tapes."""
    state, records = pyramid_forward(model, sample.image, seed, plan, dtype)
    logits = state.data[..., model.channels - model.num_classes :]
    loss, _ = loss_and_grad(logits, _finest_target(model, sample, plan), lambda_dice)
    return loss, records


def sample_loss_and_grad(model: OctreeModel, sample: Sample, seed: int, lambda_dice: float,
                         plan: PatchPlan | None = None, dtype=np.float32):
    """Loss of one sample and the flat gradient over all level parameters."""
    state, records = pyramid_forward(model, sample.image, seed, plan, dtype)
    logits = state.data[..., model.channels - model.num_classes :]
    loss, g_logits = loss_and_grad(logits, _finest_target(model, sample, plan), lambda_dice)
    g = np.zeros_like(state.data)
    g[..., model.channels - model.num_classes :] = g_logits
    grads = pyramid_backward(records, g)
    flat = np.concatenate([gw.flat() for gw in grads])
    return loss, flat, records


def pyramid_relu_pattern(records) -> np.ndarray:
    return np.concatenate([relu_pattern(tape) for tape, _ in records])


# --- evaluation ------------------------------------------------------------


def dice_scores(pred: np.ndarray, target: np.ndarray, num_classes: int) -> dict[int, float]:
    """Hard Dice per class; classes absent from both masks are skipped."""
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    classes = [1] if num_classes == 1 else range(num_classes)
    scores = {}
    for k in classes:
        p = pred == k
        t = target == k
        total = int(p.sum() + t.sum())
        if total == 0:
            continue
        scores[k] = 2.0 * int((p & t).sum()) / total
    return scores


def evaluate_dice(model: OctreeModel, samples: Sequence[Sample], engine: str = "fused",
                  seed: int | None = None) -> dict:
    per_class: dict[int, list[float]] = {}
    for s in samples:
        res = segment(s.image, model, engine, seed)
        for k, v in dice_scores(res.mask, s.mask, model.num_classes).items():
            per_class.setdefault(k, []).append(v)
    means = {k: float(np.mean(v)) for k, v in sorted(per_class.items())}
    mean = float(np.mean(list(means.values()))) if means else float("nan")
    return {"per_class": means, "mean": mean}


# --- training loop ---------------------------------------------------------


@dataclass
class TrainResult:
    model: OctreeModel
    shadow: OctreeModel
    optimizer: OptimizerState
    history: list[dict]


def _item_seed(master: int, *index: int) -> int:
    return int(np.random.SeedSequence([master, *index]).generate_state(1, dtype=np.uint64)[0])


def fit(model: OctreeModel, train: Sequence[Sample], config: TrainConfig,
        val: Sequence[Sample] = (), log_csv: str | Path | None = None) -> TrainResult:
    if not train:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    params = model.flat().astype(np.float64)
    opt = OptimizerState.start(params, config.lr0)
    history: list[dict] = []
    writer = None
    if log_csv is not None:
        fh = open(log_csv, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "val_dice", "lr"])

    current = model.copy()
    try:
        for epoch in range(config.epochs):
            opt.epoch = epoch
            opt.lr = config.lr_at(epoch)
            order = rng.permutation(len(train))
            n_batches = min(config.batches_per_epoch, -(-len(train) // config.batch_size))
            losses = []
            for b in range(n_batches):
                idx = [order[(b * config.batch_size + i) % len(order)] for i in range(config.batch_size)]
                grad_sum = np.zeros_like(params)
                batch_loss, used = 0.0, 0
                for i, k in enumerate(idx):
                    sample = train[k]
                    plan = None
                    if config.patch_levels:
                        schedule = schedule_for(current, sample.image.dims)
                        try:
                            plan = sample_patch(sample.mask, schedule, config.patch_levels,
                                                config.patch_size, rng)
                        except NoForeground:
                            continue
                    loss, g, _ = sample_loss_and_grad(
                        current, sample, _item_seed(config.seed, epoch, b, i), config.lambda_dice, plan
                    )
                    if not np.isfinite(loss):
                        raise TrainingDiverged(f"loss became {loss} at epoch {epoch}, batch {b}")
                    grad_sum += g
                    batch_loss += loss
                    used += 1
                if used == 0:
                    continue
                params = adam_update(params, grad_sum / used, opt, config.beta1, config.beta2, config.adam_eps)
                opt.shadow = ema_update(opt.shadow, params, config.ema_alpha)
                current = current.with_flat(params.astype(np.float32))
                losses.append(batch_loss / used)

            row = {"epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan"),
                   "val_dice": float("nan"), "lr": opt.lr}
            last = epoch == config.epochs - 1
            if val and (last or (epoch + 1) % config.eval_every == 0):
                shadow = model.with_flat(opt.shadow.astype(np.float32))
                row["val_dice"] = evaluate_dice(shadow, val)["mean"]
            history.append(row)
            log.info("epoch %d loss %.4f val_dice %.4f lr %.3g", epoch, row["loss"], row["val_dice"], row["lr"])
            if writer is not None:
                writer.writerow([row["epoch"], repr(row["loss"]), repr(row["val_dice"]), repr(row["lr"])])
                fh.flush()
            if config.target_dice is not None and row["val_dice"] >= config.target_dice:
                break
        opt.lr = config.lr_at(len(history))
    finally:
        if writer is not None:
            fh.close()

    shadow = model.with_flat(opt.shadow.astype(np.float32))
    return TrainResult(current, shadow, opt, history)


def save_checkpoint(result: TrainResult, out_dir: str | Path, config: TrainConfig | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model(result.model, out / "model.onca")
    save_model(result.shadow, out / "shadow.onca")
    sidecar = {
        "optimizer_step": result.optimizer.step,
        "lr": result.optimizer.lr,
        "epoch": len(result.history),
    }
    if config is not None:
        sidecar["config"] = asdict(config)
    (out / "checkpoint.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
