"""Command-line interface: ``octree-nca <command> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

log = logging.getLogger("octree_nca")


class UsageError(Exception):
    pass


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {path}")
    return p


# --- commands --------------------------------------------------------------

MODEL_KEYS = ("levels", "channels", "hidden", "alpha0", "refine_steps", "floor", "fire_rate")


def cmd_train(args) -> int:
    from .data import DatasetManifest
    from .model import OctreeModel
    from .training import TrainConfig, fit, save_checkpoint

    cfg_path = _require_file(args.config)
    try:
        raw = json.loads(cfg_path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{cfg_path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict) or "manifest" not in raw:
        raise UsageError(f"{cfg_path}: config needs a 'manifest' entry")
    if args.seed is not None:
        raw["seed"] = args.seed
    manifest_path = Path(raw.pop("manifest"))
    if not manifest_path.is_absolute():
        manifest_path = cfg_path.parent / manifest_path
    out = Path(args.out or raw.pop("out", cfg_path.parent / "run"))
    raw.pop("out", None)
    model_kw = {k: raw.pop(k) for k in MODEL_KEYS if k in raw}
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise UsageError(f"{cfg_path}: unknown config keys {unknown}")
    try:
        config = TrainConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{cfg_path}: {exc}") from exc

    manifest = DatasetManifest.read(_require_file(manifest_path))
    task = manifest.task
    model = OctreeModel.create(
        task["dims"],
        model_kw.pop("levels", 3),
        image_channels=task.get("image_channels", 1),
        num_classes=task.get("num_classes", 1),
        seed=config.seed,
        **model_kw,
    )
    train = manifest.load("train")
    val = manifest.load("test")
    out.mkdir(parents=True, exist_ok=True)
    if config.epochs == 0:
        from .training import OptimizerState, TrainResult

        params = model.flat().astype(np.float64)
        result = TrainResult(model, model.copy(), OptimizerState.start(params, config.lr0), [])
    else:
        result = fit(model, train, config, val, out / "train_log.csv")
    save_checkpoint(result, out, config)
    print(f"wrote {out / 'model.onca'}")
    return EXIT_OK


def _load_model(path):
    from .model import ModelFileError, load_model

    try:
        return load_model(_require_file(path))
    except ModelFileError as exc:
        raise UsageError(str(exc)) from exc


def cmd_infer(args) -> int:
    from .data import load_image, save_mask
    from .octree import segment

    model = _load_model(args.model)
    image = load_image(_require_file(args.input))
    if model.dim == 2 and image.ndim == 3 and image.dims[2] == 1:
        image = image.with_data(image.data[:, :, 0])
    result = segment(image, model, args.engine, args.seed, args.workers)
    save_mask(result.mask, args.output)
    print(f"wrote {args.output} ({int(result.mask.sum())} foreground cells)")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import DatasetManifest
    from .training import evaluate_dice

    model = _load_model(args.model)
    manifest = DatasetManifest.read(_require_file(args.manifest))
    samples = manifest.load(args.split if args.split != "all" else None)
    scores = evaluate_dice(model, samples, args.engine, args.seed)
    for k, v in scores["per_class"].items():
        print(f"class {k}: dice {v:.4f}")
    print(f"mean dice {scores['mean']:.4f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import bench_scaling, parse_size, write_csv

    model = _load_model(args.model)
    try:
        sizes = [parse_size(s) for s in args.sizes]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    records = bench_scaling(model.levels[-1], args.engines, sizes, args.repetitions, args.steps,
                            model.image_channels, args.seed or 0, args.workers)
    if args.out:
        out = Path(args.out)
        fresh = not out.exists() or out.stat().st_size == 0
        with open(out, "a", newline="") as fh:
            write_csv(records, fh, header=fresh)
    else:
        sys.stdout.write(write_csv(records))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import pyramid_gradcheck

    seeds = range(args.seed, args.seed + args.seeds)
    worst = max(pyramid_gradcheck(s, args.epsilon) for s in seeds)
    print(f"max relative error {worst:.3e}")
    return EXIT_OK if worst <= 1e-3 else EXIT_FAILURE


def cmd_gen(args) -> int:
    from .data import gen_synthetic

    try:
        manifest = gen_synthetic(args.task, args.count, args.extents, args.seed or 0, args.out)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(f"wrote {len(manifest.samples)} samples to {args.out}")
    return EXIT_OK


def cmd_pyramid(args) -> int:
    from .data import load_image, save_image
    from .octree import build_pyramid
    from .schedule import build_schedule

    image = load_image(_require_file(args.input))
    try:
        schedule = build_schedule(image.dims, args.levels, floor=args.floor)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".ovol" if image.ndim == 3 else ".png"
    for i, (lv, img) in enumerate(zip(schedule.levels, build_pyramid(image, schedule))):
        path = out / f"level{i}{ext}"
        save_image(img.data, path)
        print(f"{path}: {'x'.join(map(str, lv.extents))}, {lv.steps} steps")
    return EXIT_OK


# --- parser ----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="octree-nca", description="Octree neural cellular automata segmentation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train", help="train a model from a JSON config")
    s.add_argument("config")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="segment one image or volume")
    s.add_argument("model")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--engine", choices=("fused", "reference"), default="fused")
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="Dice of a model on a manifest split")
    s.add_argument("model")
    s.add_argument("manifest")
    s.add_argument("--split", choices=("train", "test", "all"), default="test")
    s.add_argument("--engine", choices=("fused", "reference"), default="fused")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="runtime and memory scaling as CSV")
    s.add_argument("model")
    s.add_argument("--sizes", nargs="+", required=True, help="e.g. 64 128 256x256")
    s.add_argument("--engines", nargs="+", choices=("fused", "reference"), default=["fused", "reference"])
    s.add_argument("--repetitions", type=int, default=3)
    s.add_argument("--steps", type=int, default=10)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("gradcheck", help="backprop against finite differences")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--seeds", type=int, default=1)
    s.add_argument("--epsilon", type=float, default=1e-3)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("gen", help="write a synthetic dataset")
    s.add_argument("task", choices=("disks2d", "blobs3d", "stripes2d"))
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--extents", type=int, nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("pyramid", help="dump the per-level images of the octree")
    s.add_argument("input")
    s.add_argument("--levels", type=int, required=True)
    s.add_argument("--floor", type=int, default=5)
    s.add_argument("--out", default="pyramid")
    s.set_defaults(func=cmd_pyramid)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"octree-nca: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # one-line diagnostic for everything else
        print(f"octree-nca: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
