"""Synthetic worlds: a grid of terrain classes with ground-truth statistics."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .. import risk
from ..errors import ValidationError
from ..mapping import RiskGrid
from ..oracle import TerrainField
from ..planner import PoseSE2

CANONICAL = ("open_field", "corridor", "forest", "island_goal")


@dataclass(frozen=True)
class TerrainClass:
    name: str
    m: float
    sigma: float
    color: tuple[int, int, int]


@dataclass(frozen=True)
class WorldSpec:
    name: str
    extents: tuple[float, float]  # (width along x, height along y), metres
    resolution: float
    classes: tuple[TerrainClass, ...]
    grid: np.ndarray  # class ids, [row=iy, col=ix]
    start: PoseSE2
    goal: tuple[float, float]
    seed: int = 0
    time_limit: float = 120.0
    gap: tuple[float, float, float, float] | None = None  # (xmin, xmax, ymin, ymax) of the intended passage
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.resolution > 0 or min(self.extents) <= 0:
            raise ValidationError("world extents and resolution must be positive")
        for c in self.classes:
            if not 0.0 <= c.m <= 1.0:
                raise ValidationError(f"class {c.name!r}: m outside [0, 1]")
            if c.sigma < 0:
                raise ValidationError(f"class {c.name!r}: negative sigma")
        h, w = self.grid.shape
        if (h, w) != self.shape:
            raise ValidationError(f"grid shape {self.grid.shape} does not match extents {self.shape}")
        if self.grid.min() < 0 or self.grid.max() >= len(self.classes):
            raise ValidationError("grid references an undefined class")
        if not self.contains(self.start.x, self.start.y) or not self.contains(*self.goal):
            raise ValidationError("start and goal must lie inside the world")
        if self.time_limit <= 0:
            raise ValidationError("time limit must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (int(round(self.extents[1] / self.resolution)), int(round(self.extents[0] / self.resolution)))

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return (0.0, self.extents[0], 0.0, self.extents[1])

    def contains(self, x: float, y: float) -> bool:
        return 0.0 <= x < self.extents[0] and 0.0 <= y < self.extents[1]

    @property
    def m(self) -> np.ndarray:
        return np.array([c.m for c in self.classes])

    @property
    def sigma(self) -> np.ndarray:
        return np.array([c.sigma for c in self.classes])

    @property
    def colors(self) -> np.ndarray:
        return np.array([c.color for c in self.classes], dtype=float)

    def terrain(self) -> TerrainField:
        return TerrainField(self.grid, self.resolution, (0.0, 0.0), self.m, self.sigma)

    def class_at(self, x: float, y: float) -> int:
        return int(self.terrain().lookup(np.array([x, y]))[()])


def rasterize(extents, resolution: float, base: int, shapes) -> np.ndarray:
    """Paint shapes in order onto a grid filled with ``base``; a cell takes
    the class of the last shape containing its centre."""
    h = int(round(extents[1] / resolution))
    w = int(round(extents[0] / resolution))
    grid = np.full((h, w), int(base), dtype=np.int64)
    yc, xc = (np.mgrid[0:h, 0:w] + 0.5) * resolution
    for s in shapes:
        kind = s.get("type")
        if kind == "rect":
            mask = (xc >= s["xmin"]) & (xc < s["xmax"]) & (yc >= s["ymin"]) & (yc < s["ymax"])
        elif kind == "disc":
            mask = (xc - s["cx"]) ** 2 + (yc - s["cy"]) ** 2 <= s["r"] ** 2
        else:
            raise ValidationError(f"unknown shape type {kind!r}")
        grid[mask] = int(s["class"])
    return grid


def world_from_dict(d: dict) -> WorldSpec:
    try:
        classes = tuple(TerrainClass(c["name"], float(c["m"]), float(c["sigma"]),
                                     tuple(int(v) for v in c["color"])) for c in d["classes"])
        names = {c.name: i for i, c in enumerate(classes)}

        def cls(v):
            return names[v] if isinstance(v, str) else int(v)

        extents = (float(d["extents"][0]), float(d["extents"][1]))
        res = float(d.get("resolution", 0.1))
        if "grid" in d:
            grid = np.array([[cls(v) for v in row] for row in d["grid"]], dtype=np.int64)
        else:
            shapes = [dict(s, **{"class": cls(s["class"])}) for s in d.get("shapes", [])]
            grid = rasterize(extents, res, cls(d.get("base", 0)), shapes)
        st = d["start"]
        return WorldSpec(
            name=str(d.get("name", "world")),
            extents=extents,
            resolution=res,
            classes=classes,
            grid=grid,
            start=PoseSE2(float(st[0]), float(st[1]), float(st[2]) if len(st) > 2 else 0.0),
            goal=(float(d["goal"][0]), float(d["goal"][1])),
            seed=int(d.get("seed", 0)),
            time_limit=float(d.get("time_limit", 120.0)),
            gap=tuple(float(v) for v in d["gap"]) if d.get("gap") else None,
            meta={k: d[k] for k in ("description",) if k in d},
        )
    except (KeyError, TypeError, IndexError) as exc:
        raise ValidationError(f"malformed world file: {exc!r}") from exc


def load_world(path_or_name) -> WorldSpec:
    """Load a world JSON file, or a canonical world by name (``corridor`` or
    ``corridor.json`` when no such local file exists)."""
    p = Path(str(path_or_name))
    if not p.exists() and p.stem in CANONICAL and p.parent == Path("."):
        text = resources.files("travnav.sim").joinpath("worlds", f"{p.stem}.json").read_text()
    else:
        if not p.exists():
            raise ValidationError(f"world file not found: {p}")
        text = p.read_text()
    try:
        return world_from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"world file is not valid JSON: {exc}") from exc


def validate_start(world: WorldSpec, threshold: float) -> None:
    m = world.classes[world.class_at(world.start.x, world.start.y)].m
    if not m > threshold:
        raise ValidationError(f"start terrain m={m} is not above the validity threshold {threshold}")


def ground_truth_grid(world: WorldSpec, level: float = risk.DEFAULT_LEVEL, count: float = 100.0) -> RiskGrid:
    """Risk grid of a fully observed world: each cell's CVaR under its true Gaussian."""
    m, s = world.m, world.sigma
    cv_cls = np.array([risk.cvar_gaussian(risk.TMarginal(np.inf, mi, si), level) for mi, si in zip(m, s)])
    cv = cv_cls[world.grid]
    return RiskGrid(cv, np.full(cv.shape, float(count)), np.ones(cv.shape, dtype=bool),
                    world.resolution, (0.0, 0.0), float(cv.min()))
