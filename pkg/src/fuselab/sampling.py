"""Input-combination enumeration, per-step combination sampling and modality masking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import SLOTS, Slot

MAX_SLOTS = 16


class CombinationError(ValueError):
    pass


@dataclass(frozen=True)
class Combination:
    """Nonempty subset of the available slots; ``id`` is its bitmask over ``available``."""

    members: tuple
    id: int
    available: tuple = SLOTS

    def __post_init__(self):
        if not self.members:
            raise CombinationError("a combination needs at least one member")
        if len(set(self.members)) != len(self.members):
            raise CombinationError(f"duplicate members in {self.members}")

    def __len__(self) -> int:
        return len(self.members)

    def __contains__(self, slot) -> bool:
        return tuple(slot) in self.members

    @property
    def label(self) -> str:
        return "+".join(Slot(*m).label for m in self.members)

    def select(self, inputs):
        """Keep the inputs whose (kind, view) is a member, in input order."""
        return [inp for inp in inputs if (inp.kind, inp.view) in self.members]


def _check_available(available) -> tuple:
    avail = tuple(Slot(*s) for s in available)
    if not avail:
        raise CombinationError("no input slots available")
    if len(avail) > MAX_SLOTS:
        raise CombinationError(f"at most {MAX_SLOTS} slots supported, got {len(avail)}")
    if len(set(avail)) != len(avail):
        raise CombinationError("available slots must be unique")
    return avail


def combination_from_id(cid: int, available: Sequence = SLOTS) -> Combination:
    avail = _check_available(available)
    if not 1 <= cid < (1 << len(avail)):
        raise CombinationError(f"combination id {cid} out of range for {len(avail)} slots")
    members = tuple(s for i, s in enumerate(avail) if cid >> i & 1)
    return Combination(members, cid, avail)


def enumerate_combinations(available: Sequence = SLOTS) -> list[Combination]:
    """All 2^n - 1 nonempty subsets, ordered by bitmask id."""
    avail = _check_available(available)
    return [combination_from_id(cid, avail) for cid in range(1, 1 << len(avail))]


def sample_combination(rng: np.random.Generator, combos: Sequence[Combination]) -> Combination:
    if not combos:
        raise CombinationError("nothing to sample from")
    return combos[int(rng.integers(len(combos)))]


def mask_modalities(c: Combination, p: float, rng: np.random.Generator) -> Combination:
    """Drop each member independently with probability ``p``.

    Single-member combinations are never masked, and a draw that would drop
    every member returns ``c`` unchanged. The generator is only advanced for
    multi-member combinations.
    """
    if not 0.0 <= p < 1.0:
        raise CombinationError(f"mask proportion must lie in [0, 1), got {p}")
    if len(c) == 1 or p == 0.0:
        return c
    keep = rng.random(len(c)) >= p
    if not keep.any() or keep.all():
        return c
    cid = 0
    for m, k in zip(c.members, keep):
        if k:
            cid |= 1 << c.available.index(m)
    return combination_from_id(cid, c.available)
