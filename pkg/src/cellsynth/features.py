"""Constrained feature parameterization of single cells and cell clusters.

A cell is described by a flat vector of *constrained features*.  The vector is
split into groups:

``[scale, surface_distance, surface_strength, colors..., nucleus_offset(3),
deformation(d), nucleus_deformation(d)]``

Colors are stored as full RGBA on :class:`CellFeatures`; only the first
``color_channels`` slots of the interleaved order
``membrane.R, nucleus.R, membrane.G, nucleus.G, ...`` are free, the remaining
channels are taken from the layout defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from importlib import resources
from typing import Sequence

import numpy as np

PRESETS = ("table1-5", "table1-32", "table1-1165", "table1-4129")

_SMOOTH_SWEEPS = 32
# repaired adjacent gaps land strictly below the bound, so clamping is idempotent
_SMOOTH_SHRINK = 1.0 - 1e-9


class LayoutError(ValueError):
    """Feature vector or feature object does not match the expected layout."""


@dataclass(frozen=True)
class FeatureLayout:
    deformation_count: int = 12
    has_nucleus: bool = True
    color_channels: int = 2
    tails: int = 4
    membrane_color: tuple = (0.85, 0.55, 0.75, 1.0)
    nucleus_color: tuple = (0.35, 0.2, 0.6, 1.0)
    name: str = "custom"

    def __post_init__(self):
        if self.deformation_count < 0:
            raise LayoutError("deformation_count must be >= 0")
        if self.tails < 1:
            raise LayoutError("tails must be >= 1")
        if not 0 <= self.color_channels <= 4 * self.n_shells:
            raise LayoutError(
                f"color_channels must be in [0, {4 * self.n_shells}] for this layout")
        if self.tails > self.total_features:
            raise LayoutError("more tails than features")

    @property
    def n_shells(self) -> int:
        return 2 if self.has_nucleus else 1

    @property
    def group_sizes(self) -> dict:
        return {
            "surface": 3,
            "color": self.color_channels,
            "nucleus_offset": 3 if self.has_nucleus else 0,
            "deformation": self.deformation_count,
            "nucleus_deformation": self.deformation_count if self.has_nucleus else 0,
        }

    @property
    def total_features(self) -> int:
        return sum(self.group_sizes.values())

    @property
    def color_slots(self) -> list:
        """(shell, channel) pairs for the free color scalars, in packing order."""
        order = [(shell, ch) for ch in range(4) for shell in range(self.n_shells)]
        return order[: self.color_channels]

    def tail_sizes(self) -> list:
        """Sizes of the contiguous chunks emitted by each generator tail."""
        return [len(chunk) for chunk in np.array_split(np.arange(self.total_features), self.tails)]

    def with_tails(self, tails: int) -> "FeatureLayout":
        d = asdict(self)
        d["tails"] = int(tails)
        return FeatureLayout(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["membrane_color"] = list(self.membrane_color)
        d["nucleus_color"] = list(self.nucleus_color)
        d["total_features"] = self.total_features
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureLayout":
        d = dict(d)
        total = d.pop("total_features", None)
        for key in ("membrane_color", "nucleus_color"):
            if key in d:
                d[key] = tuple(float(x) for x in d[key])
        layout = cls(**d)
        if total is not None and total != layout.total_features:
            raise LayoutError(
                f"declared total_features={total} but groups sum to {layout.total_features}")
        return layout


@dataclass(frozen=True)
class ConstraintSet:
    """Per-field (min, max) bounds plus the smoothness bound on deformation coefficients.

    Color bounds are per channel (4-tuples).  ``layout`` is optional; when set,
    :func:`clamp_features` refuses features of any other layout.
    """

    scale: tuple = (0.5, 1.5)
    surface_distance: tuple = (0.1, 1.0)
    surface_strength: tuple = (0.0, 0.15)
    deformation: tuple = (-0.3, 0.3)
    nucleus_deformation: tuple = (-0.3, 0.3)
    nucleus_offset: tuple = (-0.2, 0.2)
    membrane_color: tuple = ((0.0, 0.0, 0.0, 0.5), (1.0, 1.0, 1.0, 1.0))
    nucleus_color: tuple = ((0.0, 0.0, 0.0, 0.5), (1.0, 1.0, 1.0, 1.0))
    position: tuple = (-1.5, 1.5)
    smoothness_bound: float = 0.25
    nucleus_radius: float = 0.5
    overlap_factor: float = 0.6
    layout: FeatureLayout | None = field(default=None, compare=True)

    def __post_init__(self):
        for name in ("scale", "surface_distance", "surface_strength", "deformation",
                     "nucleus_deformation", "nucleus_offset", "position",
                     "membrane_color", "nucleus_color"):
            lo, hi = getattr(self, name)
            if np.any(np.asarray(lo, dtype=float) > np.asarray(hi, dtype=float)):
                raise ValueError(f"bound {name}: min > max")
        if not self.smoothness_bound > 0:
            raise ValueError("smoothness_bound must be > 0")
        if self.scale[0] <= 0:
            raise ValueError("scale lower bound must be > 0")
        if not 0 < self.nucleus_radius < 1:
            raise ValueError("nucleus_radius must be in (0, 1)")

    def to_dict(self) -> dict:
        d = {}
        for name in ("scale", "surface_distance", "surface_strength", "deformation",
                     "nucleus_deformation", "nucleus_offset", "position"):
            d[name] = [float(v) for v in getattr(self, name)]
        for name in ("membrane_color", "nucleus_color"):
            lo, hi = getattr(self, name)
            d[name] = [[float(v) for v in lo], [float(v) for v in hi]]
        d["smoothness_bound"] = float(self.smoothness_bound)
        d["nucleus_radius"] = float(self.nucleus_radius)
        d["overlap_factor"] = float(self.overlap_factor)
        if self.layout is not None:
            d["layout"] = self.layout.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ConstraintSet":
        kw = {}
        for name, value in d.items():
            if name == "layout":
                kw[name] = FeatureLayout.from_dict(value) if value is not None else None
            elif name in ("membrane_color", "nucleus_color"):
                kw[name] = (tuple(float(v) for v in value[0]), tuple(float(v) for v in value[1]))
            elif name in ("smoothness_bound", "nucleus_radius", "overlap_factor"):
                kw[name] = float(value)
            else:
                kw[name] = tuple(float(v) for v in value)
        return cls(**kw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ConstraintSet":
        return cls.from_dict(json.loads(text))

    def for_layout(self, layout: FeatureLayout) -> "ConstraintSet":
        d = self.to_dict()
        d["layout"] = layout.to_dict()
        return ConstraintSet.from_dict(d)


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


class CellFeatures:
    """Immutable feature values of one cell."""

    __slots__ = ("layout", "deformation", "nucleus_deformation", "surface_distance",
                 "surface_strength", "nucleus_offset", "scale", "membrane_color",
                 "nucleus_color")

    def __init__(self, layout: FeatureLayout, deformation, nucleus_deformation,
                 surface_distance, surface_strength, nucleus_offset, scale,
                 membrane_color, nucleus_color):
        d = layout.deformation_count
        nd = d if layout.has_nucleus else 0
        deformation = _frozen(deformation).reshape(-1)
        nucleus_deformation = _frozen(nucleus_deformation).reshape(-1)
        if deformation.shape != (d,) or nucleus_deformation.shape != (nd,):
            raise LayoutError(
                f"deformation sizes {deformation.shape}/{nucleus_deformation.shape} "
                f"do not match layout ({d}, {nd})")
        offset = _frozen(nucleus_offset).reshape(-1)
        mcol = _frozen(membrane_color).reshape(-1)
        ncol = _frozen(nucleus_color).reshape(-1)
        if offset.shape != (3,) or mcol.shape != (4,) or ncol.shape != (4,):
            raise LayoutError("nucleus_offset must have 3 entries and colors 4")
        setter = object.__setattr__
        setter(self, "layout", layout)
        setter(self, "deformation", deformation)
        setter(self, "nucleus_deformation", nucleus_deformation)
        setter(self, "surface_distance", float(surface_distance))
        setter(self, "surface_strength", float(surface_strength))
        setter(self, "nucleus_offset", offset)
        setter(self, "scale", float(scale))
        setter(self, "membrane_color", mcol)
        setter(self, "nucleus_color", ncol)

    def __setattr__(self, name, value):
        raise AttributeError("CellFeatures is immutable")

    def replace(self, **changes) -> "CellFeatures":
        kw = {name: getattr(self, name) for name in self.__slots__}
        kw.update(changes)
        return CellFeatures(**kw)

    def __eq__(self, other):
        if not isinstance(other, CellFeatures):
            return NotImplemented
        if self.layout != other.layout:
            return False
        return all(np.array_equal(getattr(self, n), getattr(other, n))
                   for n in self.__slots__ if n != "layout")

    def __hash__(self):
        return hash(pack_features(self).tobytes())

    def __repr__(self):
        return (f"CellFeatures(scale={self.scale:.4g}, d={self.layout.deformation_count}, "
                f"nucleus={self.layout.has_nucleus})")


@dataclass(frozen=True, eq=False)
class ClusterFeatures:
    cells: tuple
    positions: np.ndarray

    def __post_init__(self):
        cells = tuple(self.cells)
        pos = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        pos.setflags(write=False)
        if len(cells) < 1:
            raise LayoutError("a cluster needs at least one cell")
        if len(cells) != len(pos):
            raise LayoutError("positions and cells differ in length")
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "positions", pos)

    @property
    def count(self) -> int:
        return len(self.cells)

    def __eq__(self, other):
        if not isinstance(other, ClusterFeatures):
            return NotImplemented
        return (self.count == other.count and np.array_equal(self.positions, other.positions)
                and all(a == b for a, b in zip(self.cells, other.cells)))


def pack_features(f: CellFeatures) -> np.ndarray:
    layout = f.layout
    colors = (f.membrane_color, f.nucleus_color)
    parts = [
        [f.scale, f.surface_distance, f.surface_strength],
        [colors[shell][ch] for shell, ch in layout.color_slots],
        f.nucleus_offset if layout.has_nucleus else [],
        f.deformation,
        f.nucleus_deformation,
    ]
    return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])


def unpack_features(v, layout: FeatureLayout) -> CellFeatures:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != layout.total_features:
        raise LayoutError(
            f"expected a vector of {layout.total_features} features, got shape {v.shape}")
    colors = [np.array(layout.membrane_color, dtype=np.float64),
              np.array(layout.nucleus_color, dtype=np.float64)]
    i = 3
    for shell, ch in layout.color_slots:
        colors[shell][ch] = v[i]
        i += 1
    if layout.has_nucleus:
        offset = v[i:i + 3]
        i += 3
    else:
        offset = np.zeros(3)
    d = layout.deformation_count
    deformation = v[i:i + d]
    i += d
    nucleus_deformation = v[i:i + d] if layout.has_nucleus else np.zeros(0)
    return CellFeatures(layout, deformation, nucleus_deformation, v[1], v[2], offset,
                        v[0], colors[0], colors[1])


def packed_bounds(layout: FeatureLayout, c: ConstraintSet) -> tuple:
    """Per-entry (lo, hi) arrays aligned with :func:`pack_features`."""
    lo, hi = [], []

    def add(bounds, n=1):
        lo.extend([bounds[0]] * n)
        hi.extend([bounds[1]] * n)

    add(c.scale)
    add(c.surface_distance)
    add(c.surface_strength)
    color_bounds = (c.membrane_color, c.nucleus_color)
    for shell, ch in layout.color_slots:
        lo.append(color_bounds[shell][0][ch])
        hi.append(color_bounds[shell][1][ch])
    if layout.has_nucleus:
        add(c.nucleus_offset, 3)
    add(c.deformation, layout.deformation_count)
    if layout.has_nucleus:
        add(c.nucleus_deformation, layout.deformation_count)
    return np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)


def normalize(v, layout: FeatureLayout, c: ConstraintSet) -> np.ndarray:
    """Map packed features to the unit cube; fixed entries (min == max) map to 0."""
    lo, hi = packed_bounds(layout, c)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (np.asarray(v, dtype=np.float64) - lo) / safe, 0.0)


def denormalize(u, layout: FeatureLayout, c: ConstraintSet) -> np.ndarray:
    lo, hi = packed_bounds(layout, c)
    return lo + np.asarray(u, dtype=np.float64) * (hi - lo)


def smooth_coefficients(coeffs, bound: float) -> np.ndarray:
    """Pull adjacent coefficients together until every gap is at most ``bound``.

    Violating pairs are moved symmetrically toward their mean (at most 32
    sweeps); a final forward pass limits whatever is left.  Pairs already within
    the bound are never touched, which makes the operation idempotent.
    """
    c = np.array(coeffs, dtype=np.float64)
    if c.size < 2:
        return c
    target = bound * _SMOOTH_SHRINK
    for _ in range(_SMOOTH_SWEEPS):
        gaps = np.abs(np.diff(c))
        if not np.any(gaps > bound):
            return c
        for i in np.flatnonzero(gaps > bound):
            a, b = c[i], c[i + 1]
            if abs(b - a) <= bound:
                continue
            mid = 0.5 * (a + b)
            half = 0.5 * target * np.sign(b - a)
            c[i], c[i + 1] = mid - half, mid + half
    for i in range(c.size - 1):
        if abs(c[i + 1] - c[i]) > bound:
            c[i + 1] = c[i] + target * np.sign(c[i + 1] - c[i])
    return c


def clamp_features(f: CellFeatures, c: ConstraintSet) -> CellFeatures:
    if c.layout is not None and f.layout != c.layout:
        raise LayoutError("feature layout does not match the constraint set layout")
    layout = f.layout
    mcol = np.clip(f.membrane_color, *map(np.asarray, c.membrane_color))
    ncol = np.clip(f.nucleus_color, *map(np.asarray, c.nucleus_color))
    # channels that are not free stay at the layout default
    free = {(shell, ch) for shell, ch in layout.color_slots}
    for ch in range(4):
        if (0, ch) not in free:
            mcol[ch] = f.membrane_color[ch]
        if (1, ch) not in free:
            ncol[ch] = f.nucleus_color[ch]
    deformation = smooth_coefficients(np.clip(f.deformation, *c.deformation), c.smoothness_bound)
    nucleus_deformation = smooth_coefficients(
        np.clip(f.nucleus_deformation, *c.nucleus_deformation), c.smoothness_bound)
    offset = np.clip(f.nucleus_offset, *c.nucleus_offset) if layout.has_nucleus else f.nucleus_offset
    return CellFeatures(
        layout,
        deformation,
        nucleus_deformation,
        float(np.clip(f.surface_distance, *c.surface_distance)),
        float(np.clip(f.surface_strength, *c.surface_strength)),
        offset,
        float(np.clip(f.scale, *c.scale)),
        mcol,
        ncol,
    )


def random_features(layout: FeatureLayout, c: ConstraintSet, seed: int) -> CellFeatures:
    rng = np.random.default_rng(seed)
    lo, hi = packed_bounds(layout, c)
    v = lo + rng.random(lo.shape[0]) * (hi - lo)
    return clamp_features(unpack_features(v, layout), c)


# -- clusters -----------------------------------------------------------------

def cluster_size(layout: FeatureLayout, slots: int) -> int:
    return slots * (layout.total_features + 3)


def pack_cluster(g: ClusterFeatures) -> np.ndarray:
    return np.concatenate([np.concatenate([pack_features(f), p])
                           for f, p in zip(g.cells, g.positions)])


def unpack_cluster(v, layout: FeatureLayout, slots: int) -> ClusterFeatures:
    v = np.asarray(v, dtype=np.float64)
    n = layout.total_features + 3
    if v.ndim != 1 or v.shape[0] != slots * n:
        raise LayoutError(f"expected {slots * n} cluster features, got shape {v.shape}")
    chunks = v.reshape(slots, n)
    cells = tuple(unpack_features(ch[:-3], layout) for ch in chunks)
    return ClusterFeatures(cells, chunks[:, -3:])


def cluster_bounds(layout: FeatureLayout, c: ConstraintSet, slots: int) -> tuple:
    lo, hi = packed_bounds(layout, c)
    lo = np.concatenate([lo, [c.position[0]] * 3])
    hi = np.concatenate([hi, [c.position[1]] * 3])
    return np.tile(lo, slots), np.tile(hi, slots)


def clamp_cluster(g: ClusterFeatures, c: ConstraintSet) -> ClusterFeatures:
    return ClusterFeatures(tuple(clamp_features(f, c) for f in g.cells),
                           np.clip(g.positions, *c.position))


def random_cluster(layout: FeatureLayout, c: ConstraintSet, slots: int, seed: int) -> ClusterFeatures:
    rng = np.random.default_rng(seed)
    cells = tuple(random_features(layout, c, int(s)) for s in rng.integers(0, 2**31, slots))
    positions = rng.uniform(c.position[0], c.position[1], size=(slots, 3))
    return ClusterFeatures(cells, positions)


# -- presets --------------------------------------------------------------------

def load_preset(name: str) -> tuple:
    """Return ``(layout, constraints)`` for one of the shipped presets or a JSON path."""
    if name in PRESETS:
        text = resources.files("cellsynth.presets").joinpath(f"{name}.json").read_text()
    else:
        with open(name) as fh:
            text = fh.read()
    doc = json.loads(text)
    layout = FeatureLayout.from_dict(doc["layout"])
    constraints = ConstraintSet.from_dict({**doc.get("constraints", {}), "layout": doc["layout"]})
    return layout, constraints


def preset_for_budget(total: int) -> str:
    name = f"table1-{int(total)}"
    if name not in PRESETS:
        raise LayoutError(f"no preset with {total} features; choose from {PRESETS}")
    return name


def as_matrix(features: Sequence[CellFeatures]) -> np.ndarray:
    return np.stack([pack_features(f) for f in features])
