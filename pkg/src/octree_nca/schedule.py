"""Per-level resolutions, axis factors and step counts of the octree."""
from __future__ import annotations

from dataclasses import dataclass, field
from math import ceil
from typing import Sequence


@dataclass(frozen=True)
class LevelSpec:
    extents: tuple[int, ...]
    # factors that upsample this level onto the next-finer one (all 1 at the finest)
    factors: tuple[int, ...]
    steps: int


@dataclass(frozen=True)
class PyramidSchedule:
    """Levels ordered coarsest first; the last level has the input extents."""

    levels: tuple[LevelSpec, ...]
    alpha0: float = 1.0
    refine_steps: int = 10
    floor: int = 5

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def extents(self) -> list[tuple[int, ...]]:
        return [lv.extents for lv in self.levels]

    @property
    def steps(self) -> list[int]:
        return [lv.steps for lv in self.levels]

    def to_dict(self) -> dict:
        return {
            "alpha0": self.alpha0,
            "refine_steps": self.refine_steps,
            "floor": self.floor,
            "levels": [
                {"extents": list(lv.extents), "factors": list(lv.factors), "steps": lv.steps}
                for lv in self.levels
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PyramidSchedule":
        levels = tuple(
            LevelSpec(tuple(lv["extents"]), tuple(lv["factors"]), int(lv["steps"]))
            for lv in d["levels"]
        )
        return cls(levels, float(d["alpha0"]), int(d["refine_steps"]), int(d["floor"]))


def coarse_steps(extents: Sequence[int], alpha0: float) -> int:
    return max(1, ceil(alpha0 * max(extents)))


def build_schedule(
    input_extents: Sequence[int],
    num_levels: int,
    alpha0: float = 1.0,
    refine_steps: int = 10,
    floor: int = 5,
) -> PyramidSchedule:
    """Halve every axis per level unless that would drop it below ``floor``.

    An axis that may not be halved keeps factor 1. A level at which no axis
    can be halved means ``num_levels`` is too large for the input.
    """
    extents = tuple(int(e) for e in input_extents)
    if not 2 <= len(extents) <= 3 or any(e < 1 for e in extents):
        raise ValueError(f"invalid input extents {input_extents}")
    if num_levels < 1:
        raise ValueError("need at least one level")
    if refine_steps < 0 or alpha0 <= 0:
        raise ValueError("refine_steps must be >= 0 and alpha0 > 0")

    fine_to_coarse = [(extents, (1,) * len(extents))]
    for _ in range(num_levels - 1):
        cur = fine_to_coarse[-1][0]
        factors = tuple(2 if -(-e // 2) >= floor else 1 for e in cur)
        if all(f == 1 for f in factors):
            raise ValueError(
                f"{num_levels} levels too many for extents {extents} (floor {floor})"
            )
        coarser = tuple(-(-e // f) for e, f in zip(cur, factors))
        fine_to_coarse.append((coarser, factors))

    levels = []
    for i, (ext, _) in enumerate(reversed(fine_to_coarse)):
        # factors mapping level i onto level i+1 are those that produced level i
        j = len(fine_to_coarse) - 1 - i
        factors = fine_to_coarse[j][1] if j > 0 else (1,) * len(extents)
        steps = coarse_steps(ext, alpha0) if i == 0 else refine_steps
        levels.append(LevelSpec(ext, factors, steps))
    return PyramidSchedule(tuple(levels), alpha0, refine_steps, floor)
