"""Sample files, dataset manifests and synthetic task generators.

2D images and masks are 8-bit PNGs; 3D volumes use the ``OVOL`` container:
magic, u32 version, u32 extents ``H, W, D, C``, u32 dtype tag (0 = f32,
1 = u8), then the little-endian payload, row-major with channels innermost.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .grid import CellGrid
from .training import Sample

VOLUME_MAGIC = b"OVOL"
VOLUME_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_TAGS = {np.dtype("float32"): 0, np.dtype("uint8"): 1}

TASKS = ("disks2d", "blobs3d", "stripes2d")


class UnreadableFile(OSError):
    pass


class VolumeFormatError(ValueError):
    pass


class ExtentMismatch(ValueError):
    pass


# --- volume container ------------------------------------------------------


def save_volume(array: np.ndarray, path) -> None:
    """Write an ``(H, W, D)`` or ``(H, W, D, C)`` float32/uint8 array."""
    arr = np.asarray(array)
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.ndim != 4:
        raise ValueError(f"volumes are (H, W, D[, C]), got shape {array.shape}")
    tag = _TAGS.get(arr.dtype)
    if tag is None:
        raise ValueError(f"unsupported volume dtype {arr.dtype}")
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC + struct.pack("<IIIIII", VOLUME_VERSION, *arr.shape, tag) + payload)


def load_volume(path) -> np.ndarray:
    """Read a volume as ``(H, W, D, C)``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise UnreadableFile(f"{path}: {exc.strerror or exc}") from exc
    if raw[:4] != VOLUME_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 28:
        raise VolumeFormatError(f"{path}: truncated header")
    version, h, w, d, c, tag = struct.unpack("<IIIIII", raw[4:28])
    if version != VOLUME_VERSION:
        raise VolumeFormatError(f"{path}: version {version}, expected {VOLUME_VERSION}")
    if tag not in _DTYPES:
        raise VolumeFormatError(f"{path}: unknown dtype tag {tag}")
    dt = _DTYPES[tag]
    need = h * w * d * c * dt.itemsize
    if len(raw) - 28 != need:
        raise VolumeFormatError(f"{path}: payload has {len(raw) - 28} bytes, extents need {need}")
    return np.frombuffer(raw[28:], dtype=dt).reshape(h, w, d, c).astype(dt.newbyteorder("="))


# --- samples ---------------------------------------------------------------


def _is_volume(path) -> bool:
    return Path(path).suffix.lower() in (".ovol", ".vol")


def load_image(path) -> CellGrid:
    """Image scaled to [0, 1] as a grid whose every channel is an image channel."""
    if _is_volume(path):
        vol = load_volume(path)
        data = vol.astype(np.float32) / 255.0 if vol.dtype == np.uint8 else vol.astype(np.float32)
    else:
        try:
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
        except (OSError, ValueError) as exc:
            raise UnreadableFile(f"{path}: {exc}") from exc
        if arr.dtype != np.uint8:
            raise UnreadableFile(f"{path}: expected an 8-bit image, got {arr.dtype}")
        data = arr.astype(np.float32) / np.float32(255.0)
        if data.ndim == 2:
            data = data[..., None]
    return CellGrid(data, data.shape[-1])


def load_mask(path) -> np.ndarray:
    if _is_volume(path):
        vol = load_volume(path)
        if vol.shape[-1] != 1:
            raise VolumeFormatError(f"{path}: masks have one channel, found {vol.shape[-1]}")
        return vol[..., 0].astype(np.uint8)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise UnreadableFile(f"{path}: {exc}") from exc
    if arr.ndim != 2:
        raise UnreadableFile(f"{path}: masks must be single-channel")
    return arr.astype(np.uint8)


def load_sample(image_path, mask_path, patient: str = "") -> Sample:
    image = load_image(image_path)
    mask = load_mask(mask_path)
    if mask.shape != image.dims:
        raise ExtentMismatch(f"image {image.dims} and mask {mask.shape} extents differ")
    return Sample(image, mask, patient)


def save_mask(mask: np.ndarray, path) -> None:
    """Class ids as a palette PNG (2D) or a u8 volume (3D)."""
    mask = np.asarray(mask, dtype=np.uint8)
    if mask.ndim == 3 or _is_volume(path):
        save_volume(mask if mask.ndim == 3 else mask[..., None], path)
        return
    im = Image.fromarray(mask, mode="P")
    palette = [0, 0, 0, 255, 255, 255] + [v for k in range(2, 256) for v in ((k * 67) % 256, (k * 131) % 256, (k * 29) % 256)]
    im.putpalette(palette)
    im.save(path, format="PNG")


def save_image(data: np.ndarray, path) -> None:
    """Save a [0, 1] image; 2D grids as 8-bit PNG, 3D as f32 volumes."""
    data = np.asarray(data, dtype=np.float32)
    if _is_volume(path):
        save_volume(data, path)
        return
    arr = np.clip(np.rint(data * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path, format="PNG")


# --- manifests -------------------------------------------------------------


@dataclass
class DatasetManifest:
    task: dict
    samples: list[dict] = field(default_factory=list)
    root: Path = Path(".")

    def split(self, name: str) -> list[dict]:
        return [s for s in self.samples if s["split"] == name]

    def load(self, split: str | None = None) -> list[Sample]:
        entries = self.samples if split is None else self.split(split)
        return [
            load_sample(self.root / e["image"], self.root / e["mask"], e.get("patient", ""))
            for e in entries
        ]

    def to_json(self) -> str:
        return json.dumps({"task": self.task, "samples": self.samples}, indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except OSError as exc:
            raise UnreadableFile(f"{path}: {exc.strerror or exc}") from exc
        return cls(d["task"], d["samples"], path.parent)


def split_patients(patients: Sequence[str], test_fraction: float = 0.3, seed: int = 0) -> dict[str, str]:
    """Assign whole patients to ``train`` or ``test``."""
    unique = sorted(set(patients))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(unique))
    n_test = int(round(test_fraction * len(unique)))
    test = {unique[i] for i in order[:n_test]}
    return {p: ("test" if p in test else "train") for p in unique}


# --- synthetic tasks -------------------------------------------------------


def _smooth_noise(rng, shape, scale=0.08, passes=2):
    noise = rng.random(shape)
    for _ in range(passes):
        acc = noise.copy()
        for ax in range(noise.ndim):
            acc += np.roll(noise, 1, ax) + np.roll(noise, -1, ax)
        noise = acc / (1 + 2 * noise.ndim)
    noise = (noise - noise.min()) / max(noise.max() - noise.min(), 1e-9)
    return scale * noise


def make_disks2d(rng: np.random.Generator, extents=(64, 64)):
    """Bright anti-aliased disks on textured noise; mask = disk interiors."""
    H, W = extents
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    cover = np.zeros((H, W))
    mask = np.zeros((H, W), np.uint8)
    for _ in range(rng.integers(1, 4)):
        r = rng.uniform(0.08, 0.2) * min(H, W)
        cy, cx = rng.uniform(r, H - r), rng.uniform(r, W - r)
        dist = np.hypot(yy - cy, xx - cx)
        cover = np.maximum(cover, np.clip(r + 0.5 - dist, 0, 1))
        mask |= (dist < r).astype(np.uint8)
    image = 0.15 + _smooth_noise(rng, (H, W), 0.3) + 0.5 * cover
    return np.clip(image, 0, 1).astype(np.float32)[..., None], mask


def make_blobs3d(rng: np.random.Generator, extents=(32, 32, 8)):
    """Gaussian blobs; mask = blob field above half its peak."""
    H, W, D = extents
    grid = np.stack(np.mgrid[0:H, 0:W, 0:D], -1) + 0.5
    field_ = np.zeros((H, W, D))
    for _ in range(rng.integers(1, 4)):
        c = rng.uniform([0.2 * H, 0.2 * W, 0.2 * D], [0.8 * H, 0.8 * W, 0.8 * D])
        s = rng.uniform(0.08, 0.15) * np.array([H, W, max(D, 4)])
        field_ = np.maximum(field_, np.exp(-0.5 * (((grid - c) / s) ** 2).sum(-1)))
    mask = (field_ > 0.5).astype(np.uint8)
    image = 0.1 + 0.6 * field_ + _smooth_noise(rng, (H, W, D), 0.2)
    return np.clip(image, 0, 1).astype(np.float32)[..., None], mask


def make_stripes2d(rng: np.random.Generator, extents=(64, 64), marker: int | None = None,
                   marker_size: int | None = None):
    """Vertical stripes plus a corner marker.

    A bright marker labels the stripes as foreground, a dark one labels the
    gaps, so labelling a cell needs information from the far corner.
    """
    H, W = extents
    marker_size = max(2, min(H, W) // 4) if marker_size is None else marker_size
    drawn = int(rng.integers(0, 2))
    marker = drawn if marker is None else int(marker)
    period = int(rng.integers(6, 11))
    phase = int(rng.integers(0, period))
    width = period // 2
    cols = ((np.arange(W) + phase) % period) < width
    stripes = np.broadcast_to(cols, (H, W))
    image = np.where(stripes, 0.7, 0.3) + _smooth_noise(rng, (H, W), 0.1) - 0.05
    image[:marker_size, :marker_size] = 1.0 if marker else 0.0
    mask = stripes if marker else ~stripes
    return np.clip(image, 0, 1).astype(np.float32)[..., None], mask.astype(np.uint8)


def gen_synthetic(task: str, count: int, extents: Sequence[int], seed: int, out_dir,
                  test_fraction: float = 0.3) -> DatasetManifest:
    """Write ``count`` image/mask pairs plus ``manifest.json`` into ``out_dir``."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; choose from {TASKS}")
    extents = tuple(int(e) for e in extents)
    dims = 3 if task == "blobs3d" else 2
    if len(extents) != dims or any(e < 4 for e in extents):
        raise ValueError(f"{task} needs {dims} extents of at least 4, got {extents}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    maker = {"disks2d": make_disks2d, "blobs3d": make_blobs3d, "stripes2d": make_stripes2d}[task]
    ext = ".ovol" if dims == 3 else ".png"
    patients = [f"p{i:04d}" for i in range(count)]
    splits = split_patients(patients, test_fraction, seed)
    samples = []
    for i, patient in enumerate(patients):
        rng = np.random.default_rng([seed, i])
        image, mask = maker(rng, extents)
        img_name, mask_name = f"{patient}_image{ext}", f"{patient}_mask{ext}"
        if dims == 3:
            save_volume(image, out / img_name)
            save_volume(mask[..., None], out / mask_name)
        else:
            save_image(image, out / img_name)
            save_mask(mask, out / mask_name)
        samples.append({"image": img_name, "mask": mask_name, "split": splits[patient], "patient": patient})
    manifest = DatasetManifest(
        {"name": task, "dims": list(extents), "image_channels": 1, "num_classes": 1}, samples, out
    )
    manifest.save(out / "manifest.json")
    return manifest
