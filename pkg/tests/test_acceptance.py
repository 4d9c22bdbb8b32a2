"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v``; the outcome of
every criterion is listed under "acceptance criteria" in the summary.
"""
import math
import time

import numpy as np
import pytest

from octree_nca.bench import bench_scaling, linear_fit_r2
from octree_nca.data import gen_synthetic, DatasetManifest
from octree_nca.fused import fused_rollout
from octree_nca.grid import CellGrid, nn_upsample, seed_from_image
from octree_nca.memory import MemoryTracker
from octree_nca.model import OctreeModel, init_weights, save_model
from octree_nca.octree import segment
from octree_nca.reference import rollout_reference
from octree_nca.rng import fire_mask
from octree_nca.schedule import build_schedule
from octree_nca.training import (
    TrainConfig,
    bce_loss,
    combined_loss,
    dice_loss,
    evaluate_dice,
    fit,
    save_checkpoint,
)
from octree_nca.verify import pyramid_gradcheck

from conftest import random_state, random_weights, record_criterion


def _check(number, passed, detail):
    record_criterion(number, bool(passed), detail)
    assert passed, detail


# 1 ---------------------------------------------------------------------------


def test_1_engine_equivalence():
    rng = np.random.default_rng(2024)
    # compile both engines for both dimensionalities outside the timed region
    for dims in [(4, 4), (4, 4, 2)]:
        w, s = random_weights(len(dims)), random_state(dims)
        fused_rollout(s, w, 1)
        rollout_reference(s, w, 1)

    cases, max_abs, identical = 0, 0.0, True
    t0 = time.perf_counter()
    for case in range(100):
        dim = 2 if case % 2 == 0 else 3
        dims = tuple(int(v) for v in rng.integers(1, 65, 2))
        if dim == 3:
            dims += (int(rng.integers(1, 9)),)
        steps = int(rng.integers(0, 51))
        seed = int(rng.integers(0, 2**31))
        scale = float(rng.choice([0.05, 0.1, 0.3]))
        w = random_weights(dim, seed=seed, scale=scale)
        s = random_state(dims, seed=seed)
        level, rate = int(rng.integers(0, 5)), float(rng.choice([0.5, 0.25, 1.0]))
        a = fused_rollout(s, w, steps, seed, level, rate, workers=int(rng.choice([1, 2, 8])))
        b, _ = rollout_reference(s, w, steps, seed, level, rate)
        max_abs = max(max_abs, float(np.abs(a.data.astype(np.float64) - b.data).max()))
        identical &= a.data.tobytes() == b.data.tobytes()
        cases += 1
    seconds = time.perf_counter() - t0
    _check(1, cases >= 100 and max_abs <= 1e-5 and identical and seconds <= 120,
           f"{cases} cases, max abs diff {max_abs:.1e}, bit-identical={identical}, {seconds:.1f}s")


# 2 ---------------------------------------------------------------------------


def test_2_memory_law():
    w = init_weights(2, 16, 64, rng_seed=0)
    s = seed_from_image(CellGrid(np.random.default_rng(0).random((256, 256, 1), dtype=np.float32), 1), 16)
    tf, tr = MemoryTracker(s.cells), MemoryTracker(s.cells)
    fused_rollout(s, w, 10, tracker=tf)
    rollout_reference(s, w, 10, tracker=tr)
    f, r = tf.finish().report(), tr.finish().report()
    fused_persistent = f.persistent_per_cell
    ref_peak = r.total_per_cell
    ratio = ref_peak / f.total_per_cell
    _check(2, 32 <= fused_persistent <= 33 and ref_peak >= 96 and ratio >= 2.5,
           f"fused persistent {fused_persistent:.3f} floats/cell, reference peak {ref_peak:.1f} floats/cell, "
           f"ratio {ratio:.2f}")


# 3 ---------------------------------------------------------------------------


def test_3_linear_scaling():
    w = init_weights(2, 16, 64, rng_seed=0)
    sizes = [(s, s) for s in (64, 128, 256, 512, 1024)]
    rec = bench_scaling(w, ["fused"], sizes, repetitions=3, steps=10)
    cells = [r.cells for r in rec]
    r2_mem = linear_fit_r2(cells, [r.peak_persistent + r.peak_transient for r in rec])
    r2_time = linear_fit_r2(cells, [r.seconds for r in rec])
    _check(3, r2_mem >= 0.99 and r2_time >= 0.97, f"R^2 memory {r2_mem:.5f}, R^2 time {r2_time:.5f}")


# 4 ---------------------------------------------------------------------------


def test_4_steps_independence():
    w = init_weights(2, 16, 64, rng_seed=0)
    s = seed_from_image(CellGrid(np.random.default_rng(1).random((256, 256, 1), dtype=np.float32), 1), 16)
    peaks = []
    for steps in (10, 100):
        t = MemoryTracker(s.cells)
        fused_rollout(s, w, steps, tracker=t)
        rep = t.finish().report()
        peaks.append((rep.peak_persistent_floats, rep.peak_transient_floats))
    _check(4, peaks[0] == peaks[1], f"peaks (persistent, transient) 10 steps {peaks[0]}, 100 steps {peaks[1]}")


# 5 ---------------------------------------------------------------------------


def test_5_gradient_correctness():
    t0 = time.perf_counter()
    errors = [pyramid_gradcheck(seed, 1e-3) for seed in range(10)]
    seconds = time.perf_counter() - t0
    worst = max(errors)
    _check(5, worst <= 1e-3 and seconds <= 60,
           f"10 seeds on 8x8 two-level pyramids, max relative error {worst:.2e}, {seconds:.1f}s")


# 6 ---------------------------------------------------------------------------


def _toy_model(extents, levels, **kw):
    m = OctreeModel.create(extents, levels, seed=0, **kw)
    rng = np.random.default_rng(0)
    for w in m.levels:
        w.w2[...] = rng.normal(0, 0.1, w.w2.shape)
        w.b1[...] = rng.normal(0, 0.1, w.b1.shape)
    return m


def _far_corner_influence(model, size=128):
    base = np.random.default_rng(0).random((size, size, 1)).astype(np.float32)
    pert = base.copy()
    pert[:4, :4] = 1 - pert[:4, :4]
    a = segment(CellGrid(base, 1), model).logits
    b = segment(CellGrid(pert, 1), model).logits
    return float(np.abs(a[-16:, -16:] - b[-16:, -16:]).max())


def test_6_propagation_speed():
    radius_ok = True
    for k in (1, 3, 7):
        w = random_weights(2, seed=k, scale=0.5)
        base = np.random.default_rng(k).random((31, 31, 16)).astype(np.float32)
        pert = base.copy()
        pert[15, 15, 4] += 1.0
        a, _ = rollout_reference(CellGrid(base, 1), w, k, seed=k, fire_rate=1.0)
        b, _ = rollout_reference(CellGrid(pert, 1), w, k, seed=k, fire_rate=1.0)
        changed = np.argwhere(np.any(a.data != b.data, axis=-1))
        radius_ok &= len(changed) > 0 and int(np.abs(changed - 15).max()) <= k
    octree = _toy_model((128, 128), 5, refine_steps=10, alpha0=1.0)
    flat = _toy_model((128, 128), 1, alpha0=10 / 128)
    far_octree = _far_corner_influence(octree)
    far_flat = _far_corner_influence(flat)
    _check(6, radius_ok and flat.schedule.steps == [10] and far_octree > 0 and far_flat == 0,
           f"impulse radius exact={radius_ok}; far-corner change 5-level {far_octree:.2e} "
           f"(steps {octree.schedule.steps}), flat 10-step {far_flat:.1e}")


# 7 ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def disks_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("disks")
    manifest = gen_synthetic("disks2d", 30, (64, 64), 0, root)
    train, val = manifest.load("train"), manifest.load("test")
    model = OctreeModel.create((64, 64), 3, seed=0)
    config = TrainConfig(epochs=200, batch_size=3, eval_every=5, target_dice=0.95)
    t0 = time.perf_counter()
    result = fit(model, train, config, val)
    seconds = time.perf_counter() - t0
    return result, val, seconds


def _stripes(root, count=30):
    manifest = gen_synthetic("stripes2d", count, (64, 64), 0, root)
    return manifest.load("train"), manifest.load("test")


def test_7_desk_scale_training(disks_run, tmp_path):
    result, val, seconds = disks_run
    disks = evaluate_dice(result.shadow, val)["mean"]
    epochs = len(result.history)
    disks_ok = disks >= 0.95 and epochs <= 200 and seconds <= 30 * 60

    train, sval = _stripes(tmp_path)
    octree = OctreeModel.create((64, 64), 5, alpha0=1.0, floor=2, seed=0)
    config = TrainConfig(epochs=100, eval_every=5, target_dice=0.9)
    r5 = fit(octree, train, config, sval)
    used = len(r5.history)
    # the flat model gets the same 10 steps as every refinement level and the same epochs
    flat = OctreeModel.create((64, 64), 1, alpha0=10 / 64, seed=0)
    r1 = fit(flat, train, TrainConfig(epochs=used, eval_every=used), sval)
    d5 = evaluate_dice(r5.shadow, sval)["mean"]
    d1 = evaluate_dice(r1.shadow, sval)["mean"]
    _check(7, disks_ok and d5 - d1 >= 0.10,
           f"disks2d val Dice {disks:.4f} after {epochs} epochs in {seconds:.0f}s; stripes2d 5-level "
           f"{d5:.4f} (steps {octree.schedule.steps}) vs 1-level {d1:.4f} (steps {flat.schedule.steps}) "
           f"after {used} epochs")


def test_size_invariance_of_trained_model(disks_run):
    result, val, _ = disks_run
    agree = []
    for s in val:
        small = segment(s.image, result.shadow).mask
        big_img = nn_upsample(s.image, (2, 2), (128, 128))
        big = segment(big_img, result.shadow).mask
        assert big.shape == (128, 128)
        agree.append(np.mean(big[::2, ::2] == small))
    assert min(agree) >= 0.9, agree


# 8 ---------------------------------------------------------------------------


def test_8_hyperparameter_fidelity():
    c = TrainConfig()
    checks = {
        "lr0": c.lr0 == 1.6e-3,
        "lr_decay": c.lr_decay == 0.9992,
        "betas": (c.beta1, c.beta2) == (0.9, 0.99),
        "ema": c.ema_alpha == 0.99,
    }
    rng = np.random.default_rng(0)
    p = rng.random((12, 12, 1))
    t = (rng.random((12, 12, 1)) > 0.5).astype(float)
    checks["lambda0"] = combined_loss(p, t, 0.0) == 2 * bce_loss(p, t)
    checks["lambda2"] = combined_loss(p, t, 2.0) == 2 * dice_loss(p, t)

    model = OctreeModel.create((64, 64), 3)
    n = 200_000
    fired = int(fire_mask(model.seed, 0, 0, n, model.fire_rate).sum())
    checks["fire_rate"] = model.fire_rate == 0.5 and abs(fired - n / 2) <= 3 * math.sqrt(n / 4)

    sched = build_schedule((320, 320, 24), 5)
    checks["radiology_table"] = sched.extents == [(20, 20, 6), (40, 40, 6), (80, 80, 6), (160, 160, 12), (320, 320, 24)]
    checks["coarse_steps"] = sched.steps[0] == math.ceil(1.0 * 20) and \
        build_schedule((320, 320, 24), 5, alpha0=0.35).steps[0] == math.ceil(0.35 * 20)
    checks["refine_steps"] = sched.steps[1:] == [10, 10, 10, 10]
    failed = [k for k, v in checks.items() if not v]
    _check(8, not failed, f"{len(checks) - len(failed)}/{len(checks)} hyperparameter checks" +
           (f", failed: {failed}" if failed else ""))


# 9 ---------------------------------------------------------------------------


def test_9_determinism(tmp_path):
    root = tmp_path / "data"
    manifest = gen_synthetic("disks2d", 6, (32, 32), 5, root)
    train = DatasetManifest.read(root / "manifest.json").load("train")
    model = OctreeModel.create((32, 32), 3, seed=7)
    config = TrainConfig(epochs=2, batches_per_epoch=2, seed=7)
    blobs = []
    for run in ("a", "b"):
        save_checkpoint(fit(model, train, config), tmp_path / run, config)
        blobs.append({f: (tmp_path / run / f).read_bytes() for f in ("model.onca", "shadow.onca", "checkpoint.json")})
    checkpoints_same = blobs[0] == blobs[1]

    trained = fit(model, train, config).shadow
    img = manifest.load("test")[0].image
    masks = {}
    for workers in (1, 2, 8):
        for run in range(2):
            res = segment(img, trained, "fused", seed=3, workers=workers)
            masks[(workers, run)] = res.mask.tobytes() + res.logits.tobytes()
    masks_same = len(set(masks.values())) == 1
    _check(9, checkpoints_same and masks_same,
           f"checkpoints identical across runs={checkpoints_same}; masks+logits identical across runs and "
           f"workers {{1,2,8}}={masks_same}")
