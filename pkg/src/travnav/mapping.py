"""Sparse voxel map of traversability beliefs and its 2D risk compression."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from . import risk
from .errors import ValidationError
from .nig import DEFAULT_PRIOR, NigState, nig_update_one

MAP_FORMAT = "travnav-voxel-map/1"


class VoxelKey(NamedTuple):
    ix: int
    iy: int
    iz: int = 0


@dataclass(frozen=True)
class CellState:
    nig: NigState = DEFAULT_PRIOR
    alpha: float = 1.0
    beta: float = 1.0

    @property
    def occupancy_mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)


def beta_update(cell: CellState, hit: bool) -> CellState:
    if hit:
        return replace(cell, alpha=cell.alpha + 1.0)
    return replace(cell, beta=cell.beta + 1.0)


@dataclass(frozen=True)
class VoxelMap:
    """Immutable snapshot; :func:`insert_observations` returns a new one.

    Keys absent from ``cells`` hold the prior.
    """

    resolution: float = 0.1
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    prior: NigState = DEFAULT_PRIOR
    alpha0: float = 1.0
    beta0: float = 1.0
    revision: int = 0
    cells: Mapping[VoxelKey, CellState] = field(default_factory=lambda: MappingProxyType({}))
    clamped: int = 0

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValidationError("map resolution must be positive")
        self.prior.validate()
        if not isinstance(self.cells, MappingProxyType):
            object.__setattr__(self, "cells", MappingProxyType(dict(self.cells)))

    @property
    def prior_cell(self) -> CellState:
        return CellState(self.prior, self.alpha0, self.beta0)

    def cell(self, key: VoxelKey) -> CellState:
        return self.cells.get(key, self.prior_cell)

    def key_of(self, x: float, y: float, z: float = 0.0) -> VoxelKey:
        ox, oy, oz = self.origin
        r = self.resolution
        return VoxelKey(math.floor((x - ox) / r), math.floor((y - oy) / r), math.floor((z - oz) / r))

    def center_of(self, key: VoxelKey) -> tuple[float, float, float]:
        ox, oy, oz = self.origin
        r = self.resolution
        return (ox + (key[0] + 0.5) * r, oy + (key[1] + 0.5) * r, oz + (key[2] + 0.5) * r)


def insert_observations(vmap: VoxelMap, obs: Iterable[tuple[VoxelKey, float]]) -> VoxelMap:
    """Fuse a batch of (key, traversability sample) pairs; one revision per batch."""
    obs = list(obs)
    if not obs:
        return vmap
    cells = dict(vmap.cells)
    clamped = vmap.clamped
    prior_cell = vmap.prior_cell
    for key, x in obs:
        x = float(x)
        if not math.isfinite(x):
            raise ValidationError(f"non-finite traversability sample: {x!r}")
        if x < 0.0 or x > 1.0:
            clamped += 1
            x = min(max(x, 0.0), 1.0)
        key = VoxelKey(*key)
        c = cells.get(key, prior_cell)
        cells[key] = CellState(nig_update_one(c.nig, x), c.alpha + 1.0, c.beta)
    return replace(vmap, cells=MappingProxyType(cells), revision=vmap.revision + 1, clamped=clamped)


@dataclass(frozen=True)
class RiskGrid:
    """2D worst-case compression of the voxel map.

    Arrays are indexed ``[row, col] = [iy - iy0, ix - ix0]``; ``origin`` is
    the world position of the lower-left corner of cell ``(ix0, iy0)``.
    """

    cvar: np.ndarray
    count: np.ndarray
    observed: np.ndarray
    resolution: float
    origin: tuple[float, float]
    prior_cvar: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.cvar.shape

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        """(xmin, xmax, ymin, ymax) of the covered area."""
        h, w = self.cvar.shape
        ox, oy = self.origin
        return (ox, ox + w * self.resolution, oy, oy + h * self.resolution)

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        """(row, col) of the cell containing a world point (may be out of range)."""
        return (math.floor((y - self.origin[1]) / self.resolution),
                math.floor((x - self.origin[0]) / self.resolution))

    def contains(self, x: float, y: float) -> bool:
        xmin, xmax, ymin, ymax = self.bounds
        return xmin <= x < xmax and ymin <= y < ymax

    @classmethod
    def uniform(cls, shape, cvar_value: float, count: float = 0, resolution: float = 0.1,
                origin=(0.0, 0.0), observed: bool = True, prior_cvar: float | None = None) -> "RiskGrid":
        return cls(
            cvar=np.full(shape, float(cvar_value)),
            count=np.full(shape, count, dtype=float),
            observed=np.full(shape, observed, dtype=bool),
            resolution=resolution,
            origin=(float(origin[0]), float(origin[1])),
            prior_cvar=float(cvar_value if prior_cvar is None else prior_cvar),
        )


def compress_pillars(vmap: VoxelMap, z_min: float, z_max: float,
                     extent: tuple[int, int, int, int] | None = None,
                     level: float = risk.DEFAULT_LEVEL,
                     cvar_fn: Callable[[Sequence[CellState]], np.ndarray] | None = None) -> RiskGrid:
    """Collapse each (ix, iy) column over [z_min, z_max] to its worst voxel.

    ``extent`` is ``(ix0, iy0, width, height)`` in cell indices; by default
    the bounding box of the observed columns. Pillars with no observed voxel
    carry the prior CVaR and count 0.
    """
    if not z_min < z_max:
        raise ValidationError("need z_min < z_max")
    kz0 = math.floor((z_min - vmap.origin[2]) / vmap.resolution)
    kz1 = math.floor((z_max - vmap.origin[2]) / vmap.resolution)
    keys = sorted(k for k in vmap.cells if kz0 <= k[2] <= kz1)
    states = [vmap.cells[k] for k in keys]

    if cvar_fn is None:
        def cvar_fn(cs):
            return risk.cvar_arrays([c.nig.gamma for c in cs], [c.nig.kappa for c in cs],
                                    [c.nig.a for c in cs], [c.nig.b for c in cs], level)
    prior_cvar = float(cvar_fn([vmap.prior_cell])[0])

    if extent is None:
        if keys:
            ixs = [k[0] for k in keys]
            iys = [k[1] for k in keys]
            extent = (min(ixs), min(iys), max(ixs) - min(ixs) + 1, max(iys) - min(iys) + 1)
        else:
            extent = (0, 0, 1, 1)
    ix0, iy0, w, h = extent

    cv = np.full((h, w), np.inf)
    cnt = np.full((h, w), np.inf)
    if keys:
        vals = np.asarray(cvar_fn(states), dtype=float)
        ns = np.array([c.nig.n for c in states], dtype=float)
        cols = np.array([k[0] for k in keys]) - ix0
        rows = np.array([k[1] for k in keys]) - iy0
        inside = (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
        np.minimum.at(cv, (rows[inside], cols[inside]), vals[inside])
        np.minimum.at(cnt, (rows[inside], cols[inside]), ns[inside])
    observed = np.isfinite(cv)
    cv[~observed] = prior_cvar
    cnt[~observed] = 0.0
    r = vmap.resolution
    origin = (vmap.origin[0] + ix0 * r, vmap.origin[1] + iy0 * r)
    return RiskGrid(cv, cnt, observed, r, origin, prior_cvar)


# -- snapshot file --------------------------------------------------------

def map_to_dict(vmap: VoxelMap) -> dict:
    p = vmap.prior
    return {
        "format": MAP_FORMAT,
        "resolution": vmap.resolution,
        "origin": list(vmap.origin),
        "prior": {"gamma": p.gamma, "kappa": p.kappa, "a": p.a, "b": p.b,
                  "alpha": vmap.alpha0, "beta": vmap.beta0},
        "revision": vmap.revision,
        "clamped": vmap.clamped,
        "cells": [
            {"key": list(k), "gamma": c.nig.gamma, "kappa": c.nig.kappa, "a": c.nig.a,
             "b": c.nig.b, "n": c.nig.n, "alpha": c.alpha, "beta": c.beta,
             "mean": c.nig.mean, "m2": c.nig.m2}
            for k, c in sorted(vmap.cells.items())
        ],
    }


def map_from_dict(d: dict) -> VoxelMap:
    try:
        p = d["prior"]
        cells = {}
        for rec in d["cells"]:
            key = VoxelKey(*(int(v) for v in rec["key"]))
            nig = NigState(float(rec["gamma"]), float(rec["kappa"]), float(rec["a"]),
                           float(rec["b"]), int(rec["n"]), float(rec.get("mean", 0.0)),
                           float(rec.get("m2", 0.0))).validate()
            cells[key] = CellState(nig, float(rec["alpha"]), float(rec["beta"]))
        return VoxelMap(
            resolution=float(d["resolution"]),
            origin=tuple(float(v) for v in d["origin"]),
            prior=NigState(float(p["gamma"]), float(p["kappa"]), float(p["a"]), float(p["b"])),
            alpha0=float(p["alpha"]), beta0=float(p["beta"]),
            revision=int(d["revision"]), cells=cells, clamped=int(d.get("clamped", 0)),
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed map snapshot: {exc}") from exc


def save_map(vmap: VoxelMap, path) -> None:
    # json writes floats via repr(), the shortest string that round-trips exactly
    with open(path, "w") as f:
        json.dump(map_to_dict(vmap), f, indent=1)


def load_map(path) -> VoxelMap:
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read map snapshot {path}: {exc}") from exc
    return map_from_dict(doc)
