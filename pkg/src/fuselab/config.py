"""Size profiles and the canonical sensor slot ordering."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np


class Slot(NamedTuple):
    kind: str
    view: int

    @property
    def label(self) -> str:
        short = {"image": "img", "depth": "dep", "radar": "radar"}[self.kind]
        return short if self.kind == "radar" else f"{short}{self.view}"


# canonical input ordering: bit i of a combination id refers to SLOTS[i]
SLOTS = (Slot("image", 1), Slot("image", 2), Slot("depth", 1), Slot("depth", 2), Slot("radar", 1))
KINDS = ("image", "depth", "radar")


def slot_index(kind: str, view: int) -> int:
    try:
        return SLOTS.index(Slot(kind, view))
    except ValueError:
        raise KeyError(f"no input slot for {kind} view {view}") from None


@dataclass(frozen=True)
class Profile:
    name: str
    image_size: int
    image_channels: int
    patch: int
    n_depth: int
    n_radar: int
    k_tokens: int
    d_global: int
    group_radius: float
    group_size: int
    point_hidden: int
    d_model: int
    heads: int
    gc_hidden: int
    focal: float
    noisy_depth_points: int
    gim_layers: int = 3
    # network-internal length unit: coordinates enter as (p - origin) / length_unit
    # and decoded offsets leave multiplied by length_unit
    length_unit: float = 0.1
    origin: tuple = (0.0, 0.0, 0.9)
    width_factors: tuple = (1.0, 0.5, 0.25)

    @property
    def d_tok(self) -> int:
        return 3 + self.d_global

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    def to_net(self, xyz):
        """World meters to network units."""
        return (np.asarray(xyz) - np.asarray(self.origin)) / self.length_unit

    @property
    def ftm_widths(self) -> tuple:
        return tuple(int(round(self.d_model * f)) for f in self.width_factors)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["width_factors"] = list(self.width_factors)
        d["origin"] = list(self.origin)
        return d


DESK = Profile(name="desk", image_size=32, image_channels=1, patch=8, n_depth=256, n_radar=64,
               k_tokens=16, d_global=64, group_radius=0.3, group_size=32, point_hidden=32,
               d_model=64, heads=4, gc_hidden=16, focal=42.0, noisy_depth_points=64)

PAPER = Profile(name="paper", image_size=224, image_channels=3, patch=32, n_depth=4096, n_radar=1024,
                k_tokens=49, d_global=2048, group_radius=0.3, group_size=32, point_hidden=256,
                d_model=1024, heads=4, gc_hidden=64, focal=294.0, noisy_depth_points=256)

PROFILES = {"desk": DESK, "paper": PAPER}


def get_profile(name: str) -> Profile:
    try:
        return PROFILES[name]
    except KeyError:
        raise KeyError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None
