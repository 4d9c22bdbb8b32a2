"""Per-level NCA parameters, initialization and the ``ONCA`` model file."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .schedule import PyramidSchedule, build_schedule

MAGIC = b"ONCA"
VERSION = 1


class ModelFileError(ValueError):
    pass


class BadMagic(ModelFileError):
    pass


class VersionMismatch(ModelFileError):
    pass


class TruncatedBlob(ModelFileError):
    pass


class HeaderBlobMismatch(ModelFileError):
    """The blob has more bytes than the header accounts for."""


@dataclass
class NcaWeights:
    """One backbone NCA.

    ``conv`` is ``(C, 3**dim)`` depthwise kernels, ``w1`` is ``(2C, hidden)``
    applied to ``[state, perception]``, ``b1`` is ``(hidden,)`` and ``w2`` is
    ``(hidden, C)``.
    """

    conv: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray

    @property
    def channels(self) -> int:
        return self.conv.shape[0]

    @property
    def hidden(self) -> int:
        return self.b1.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.conv.shape[1]

    @property
    def dim(self) -> int:
        return {9: 2, 27: 3}[self.kernel_size]

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.conv, self.w1, self.b1, self.w2)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def astype(self, dtype) -> "NcaWeights":
        return NcaWeights(*(np.ascontiguousarray(a, dtype=dtype) for a in self.arrays()))

    def copy(self) -> "NcaWeights":
        return NcaWeights(*(a.copy() for a in self.arrays()))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_flat(cls, flat: np.ndarray, dim: int, channels: int, hidden: int) -> "NcaWeights":
        shapes = param_shapes(dim, channels, hidden)
        parts, pos = [], 0
        for shp in shapes:
            n = int(np.prod(shp))
            parts.append(flat[pos : pos + n].reshape(shp).copy())
            pos += n
        return cls(*parts)

    def validate(self):
        C, hid = self.channels, self.hidden
        if self.w1.shape != (2 * C, hid) or self.w2.shape != (hid, C):
            raise ValueError(
                f"inconsistent layer shapes conv={self.conv.shape} w1={self.w1.shape} "
                f"b1={self.b1.shape} w2={self.w2.shape}"
            )
        if self.kernel_size not in (9, 27):
            raise ValueError(f"kernel must be 3x3 or 3x3x3, got {self.kernel_size} taps")
        if not all(np.isfinite(a).all() for a in self.arrays()):
            raise ValueError("non-finite weights")


def param_shapes(dim: int, channels: int, hidden: int) -> list[tuple[int, ...]]:
    return [(channels, 3**dim), (2 * channels, hidden), (hidden,), (hidden, channels)]


def level_param_count(dim: int, channels: int, hidden: int) -> int:
    return channels * 3**dim + 2 * channels * hidden + hidden + hidden * channels


def init_weights(dim: int, channels: int = 16, hidden: int = 64, rng_seed: int = 0) -> NcaWeights:
    """Uniform(+-1/sqrt(fan_in)) for conv and w1, zero bias, zero w2."""
    if dim not in (2, 3) or channels < 1 or hidden < 1:
        raise ValueError(f"invalid dimensions dim={dim} C={channels} hidden={hidden}")
    rng = np.random.default_rng(rng_seed)
    k = 3**dim
    conv = rng.uniform(-1, 1, (channels, k)) / np.sqrt(k)
    w1 = rng.uniform(-1, 1, (2 * channels, hidden)) / np.sqrt(2 * channels)
    return NcaWeights(
        conv.astype(np.float32),
        w1.astype(np.float32),
        np.zeros(hidden, np.float32),
        np.zeros((hidden, channels), np.float32),
    )


@dataclass
class OctreeModel:
    levels: list[NcaWeights]
    schedule: PyramidSchedule
    image_channels: int
    num_classes: int = 1
    fire_rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if len(self.levels) != self.schedule.num_levels:
            raise ValueError(
                f"{len(self.levels)} weight sets for {self.schedule.num_levels} levels"
            )
        if self.levels:
            ref = self.levels[0]
            for w in self.levels:
                w.validate()
                if (w.conv.shape, w.w1.shape) != (ref.conv.shape, ref.w1.shape):
                    raise ValueError("all levels must share the same architecture")
            if self.num_classes > self.channels - self.image_channels:
                raise ValueError("class logits must fit in the hidden channels")
        if not 0 < self.fire_rate <= 1:
            raise ValueError(f"fire_rate must be in (0, 1], got {self.fire_rate}")

    @property
    def channels(self) -> int:
        return self.levels[0].channels

    @property
    def hidden(self) -> int:
        return self.levels[0].hidden

    @property
    def dim(self) -> int:
        return len(self.schedule.levels[-1].extents)

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    def copy(self) -> "OctreeModel":
        return replace(self, levels=[w.copy() for w in self.levels])

    def flat(self) -> np.ndarray:
        if not self.levels:
            return np.zeros(0, np.float32)
        return np.concatenate([w.flat() for w in self.levels])

    def with_flat(self, flat: np.ndarray) -> "OctreeModel":
        n = level_param_count(self.dim, self.channels, self.hidden)
        levels = [
            NcaWeights.from_flat(flat[i * n : (i + 1) * n], self.dim, self.channels, self.hidden)
            for i in range(self.num_levels)
        ]
        return replace(self, levels=levels)

    @classmethod
    def create(
        cls,
        extents,
        num_levels: int,
        image_channels: int = 1,
        num_classes: int = 1,
        channels: int = 16,
        hidden: int = 64,
        alpha0: float = 1.0,
        refine_steps: int = 10,
        floor: int = 5,
        fire_rate: float = 0.5,
        seed: int = 0,
    ) -> "OctreeModel":
        schedule = build_schedule(extents, num_levels, alpha0, refine_steps, floor)
        dim = len(schedule.levels[-1].extents)
        seeds = np.random.SeedSequence(seed).generate_state(num_levels, dtype=np.uint64)
        levels = [init_weights(dim, channels, hidden, int(s)) for s in seeds]
        return cls(levels, schedule, image_channels, num_classes, fire_rate, seed)


def count_params(model: OctreeModel) -> int:
    return sum(w.size for w in model.levels)


def _header(model: OctreeModel) -> dict:
    return {
        "dim": model.dim,
        "channels": model.channels,
        "hidden": model.hidden,
        "image_channels": model.image_channels,
        "num_classes": model.num_classes,
        "fire_rate": model.fire_rate,
        "num_levels": model.num_levels,
        "schedule": model.schedule.to_dict(),
        "seed": int(model.seed),
    }


def save_model(model: OctreeModel, path) -> None:
    header = json.dumps(_header(model), sort_keys=True).encode("utf-8")
    blob = b"".join(
        np.ascontiguousarray(a, dtype="<f4").tobytes() for w in model.levels for a in w.arrays()
    )
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(header)) + header + blob)


def load_model(path) -> OctreeModel:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise BadMagic(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise TruncatedBlob(f"{path}: file ends inside the preamble")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {VERSION}")
    if len(raw) < 12 + hlen:
        raise TruncatedBlob(f"{path}: file ends inside the header")
    try:
        h = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFileError(f"{path}: unreadable header ({exc})") from exc
    blob = raw[12 + hlen :]
    dim, C, hid, L = h["dim"], h["channels"], h["hidden"], h["num_levels"]
    per_level = level_param_count(dim, C, hid)
    expected = 4 * per_level * L
    if len(blob) < expected:
        raise TruncatedBlob(f"{path}: blob has {len(blob)} bytes, header needs {expected}")
    if len(blob) > expected:
        raise HeaderBlobMismatch(f"{path}: blob has {len(blob)} bytes, header declares {expected}")
    flat = np.frombuffer(blob, dtype="<f4").astype(np.float32)
    levels = [
        NcaWeights.from_flat(flat[i * per_level : (i + 1) * per_level], dim, C, hid)
        for i in range(L)
    ]
    return OctreeModel(
        levels,
        PyramidSchedule.from_dict(h["schedule"]),
        h["image_channels"],
        h["num_classes"],
        h["fire_rate"],
        h["seed"],
    )
