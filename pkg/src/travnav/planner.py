"""Traversability-aware RRT* over a :class:`~travnav.mapping.RiskGrid`.

Validity replaces collision checking: a pose is valid when the mean CVaR
under its footprint clears a threshold. Edge cost has no distance term; the
per-pose cost ``exp(-w1 cvar) + w2 exp(kappa_b - count)`` is integrated
along the edge, so detours pay for their length anyway.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels
from .errors import PlanningError, ValidationError
from .mapping import RiskGrid

_EPS = 1e-9


def normalize_angle(a):
    """Wrap to (-pi, pi]."""
    if isinstance(a, np.ndarray):
        out = np.mod(a + np.pi, 2 * np.pi) - np.pi
        return np.where(out <= -np.pi, out + 2 * np.pi, out)
    out = math.fmod(a + math.pi, 2 * math.pi)
    if out < 0:
        out += 2 * math.pi
    out -= math.pi
    return math.pi if out <= -math.pi else out


@dataclass(frozen=True)
class PoseSE2:
    x: float
    y: float
    psi: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "psi", normalize_angle(float(self.psi)))

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.psi)


@dataclass(frozen=True)
class RobotDims:
    length: float = 0.6
    width: float = 0.4

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValidationError("robot dimensions must be positive")

    @property
    def half_extents(self) -> tuple[float, float]:
        """Half extents of the footprint rectangle, itself half the robot's size."""
        return (self.length / 4.0, self.width / 4.0)


@dataclass(frozen=True)
class PlannerParams:
    w1: float = 2.0
    w2: float = 1.0
    kappa_b: float = 3.0
    max_iters: int = 5000
    step: float = 0.5
    rewire_radius: float = 1.5
    goal_tolerance: float = 0.3
    validity_threshold: float = 0.25
    goal_bias: float = 0.05
    heading_weight: float = 0.5
    seed: int = 0
    anytime: bool = True

    def __post_init__(self):
        for name in ("w1", "w2", "step", "rewire_radius", "goal_tolerance"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"planner parameter {name} must be positive")
        if self.max_iters < 0:
            raise ValidationError("max_iters must be non-negative")
        if self.goal_tolerance >= self.rewire_radius:
            raise ValidationError("goal tolerance must be below the rewire radius")


# -- footprint -------------------------------------------------------------

def _window(dims: RobotDims, resolution: float) -> np.ndarray:
    r = _window_radius(dims, resolution)
    d = np.arange(-r, r + 1)
    dx, dy = np.meshgrid(d, d, indexing="xy")
    return np.stack([dx.ravel(), dy.ravel()], axis=1)


def footprint_cells(pose: PoseSE2, dims: RobotDims, resolution: float,
                    origin: tuple[float, float] = (0.0, 0.0)) -> list[tuple[int, int]]:
    """Global (ix, iy) indices of cells whose centres lie in the footprint."""
    mask, ix, iy = _footprint_mask(np.array([pose.x]), np.array([pose.y]), np.array([pose.psi]),
                                   dims, resolution, origin)
    return [(int(a), int(b)) for a, b in zip(ix[0][mask[0]], iy[0][mask[0]])]


def _footprint_mask(xs, ys, psis, dims, resolution, origin):
    off = _window(dims, resolution)
    cx = np.floor((xs - origin[0]) / resolution).astype(np.int64)
    cy = np.floor((ys - origin[1]) / resolution).astype(np.int64)
    ix = cx[:, None] + off[None, :, 0]
    iy = cy[:, None] + off[None, :, 1]
    px = origin[0] + (ix + 0.5) * resolution - xs[:, None]
    py = origin[1] + (iy + 0.5) * resolution - ys[:, None]
    c = np.cos(psis)[:, None]
    s = np.sin(psis)[:, None]
    bx = c * px + s * py
    by = -s * px + c * py
    hl, hw = dims.half_extents
    mask = (np.abs(bx) <= hl + _EPS) & (np.abs(by) <= hw + _EPS)
    # footprint smaller than a cell: fall back to the containing cell
    empty = ~mask.any(axis=1)
    if np.any(empty):
        centre = np.flatnonzero((off[:, 0] == 0) & (off[:, 1] == 0))[0]
        mask[empty, centre] = True
    return mask, ix, iy


def _window_radius(dims: RobotDims, resolution: float) -> int:
    hl, hw = dims.half_extents
    # a cell centre k cells away lies at least (k - 0.5) cells from the pose
    return int(math.floor(math.hypot(hl, hw) / resolution + 0.5 + 1e-9))


def footprint_stats(grid: RiskGrid, xs, ys, psis, dims: RobotDims) -> tuple[np.ndarray, np.ndarray]:
    """Mean CVaR and mean observation count under each footprint.

    Cells outside the grid count as unobserved (prior CVaR, count 0).
    """
    xs = np.asarray(xs, dtype=float)
    psis = np.ascontiguousarray(np.broadcast_to(np.asarray(psis, dtype=float), xs.shape)).ravel()
    xs = np.ascontiguousarray(xs).ravel()
    ys = np.ascontiguousarray(np.asarray(ys, dtype=float)).ravel()
    hl, hw = dims.half_extents
    return _kernels.footprint_many(xs, ys, psis, hl, hw, _window_radius(dims, grid.resolution),
                                   grid.resolution, grid.origin[0], grid.origin[1],
                                   grid.cvar, grid.count, grid.prior_cvar)


def footprint_cvar(grid: RiskGrid, pose: PoseSE2, dims: RobotDims) -> float:
    cv, _ = footprint_stats(grid, [pose.x], [pose.y], [pose.psi], dims)
    return float(cv[0])


def is_valid(pose: PoseSE2, grid: RiskGrid, params: PlannerParams, dims: RobotDims) -> bool:
    return footprint_cvar(grid, pose, dims) >= params.validity_threshold


# -- edges -----------------------------------------------------------------

def _edge_batch(grid: RiskGrid, src: np.ndarray, dst: np.ndarray, params: PlannerParams,
                dims: RobotDims) -> tuple[np.ndarray, np.ndarray]:
    """Costs and validity of straight edges src[i] -> dst[i] (positions only)."""
    hl, hw = dims.half_extents
    xmin, xmax, ymin, ymax = grid.bounds
    return _kernels.edges(np.ascontiguousarray(src, dtype=float), np.ascontiguousarray(dst, dtype=float),
                          hl, hw, _window_radius(dims, grid.resolution), grid.resolution,
                          grid.origin[0], grid.origin[1], grid.cvar, grid.count, grid.prior_cvar,
                          params.w1, params.w2, params.kappa_b, params.validity_threshold,
                          xmin, xmax, ymin, ymax)


def edge_cost(grid: RiskGrid, a: PoseSE2, b: PoseSE2, params: PlannerParams, dims: RobotDims) -> float:
    """Mean per-pose cost along the segment a -> b, times its length.

    Sub-poses are spaced at most half a cell apart; zero-length edges
    (rotation in place) are free.
    """
    c, _ = _edge_batch(grid, np.array([[a.x, a.y]]), np.array([[b.x, b.y]]), params, dims)
    return float(c[0])


# -- RRT* ------------------------------------------------------------------

@dataclass
class Path:
    poses: list[PoseSE2]
    cost: float
    best_effort: bool = False
    iterations: int = 0
    cost_history: list[float] = field(default_factory=list)
    nodes: int = 0
    # (node, cost before, cost after) for each rewire, recorded when debugging
    rewire_log: list[tuple[int, float, float]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "poses": [list(p.as_tuple()) for p in self.poses],
            "cost": self.cost,
            "best_effort": self.best_effort,
            "iterations": self.iterations,
            "nodes": self.nodes,
        }

    @property
    def length(self) -> float:
        return sum(math.hypot(b.x - a.x, b.y - a.y) for a, b in zip(self.poses, self.poses[1:]))


def save_path(path: Path, fp) -> None:
    json.dump(path.to_json(), fp, indent=1)


class _Tree:
    def __init__(self, capacity: int, start: PoseSE2):
        self.xy = np.empty((capacity, 2))
        self.psi = np.empty(capacity)
        self.parent = np.full(capacity, -1, dtype=np.int64)
        self.cost = np.empty(capacity)
        self.children: list[list[int]] = []
        self.size = 0
        self.add(start.x, start.y, start.psi, -1, 0.0)

    def add(self, x, y, psi, parent, cost) -> int:
        i = self.size
        self.xy[i] = (x, y)
        self.psi[i] = psi
        self.parent[i] = parent
        self.cost[i] = cost
        self.children.append([])
        if parent >= 0:
            self.children[parent].append(i)
        self.size += 1
        return i

    def reparent(self, i: int, new_parent: int, new_cost: float) -> None:
        old = self.parent[i]
        self.children[old].remove(i)
        self.children[new_parent].append(i)
        self.parent[i] = new_parent
        delta = new_cost - self.cost[i]
        d = self.xy[i] - self.xy[new_parent]
        self.psi[i] = math.atan2(d[1], d[0])
        stack = [i]
        while stack:
            j = stack.pop()
            self.cost[j] += delta
            stack.extend(self.children[j])

    def branch(self, i: int) -> list[int]:
        out = []
        while i >= 0:
            out.append(i)
            i = int(self.parent[i])
        return out[::-1]


def rrt_star(start: PoseSE2, goal: PoseSE2, bounds: tuple[float, float, float, float],
             grid: RiskGrid, params: PlannerParams = PlannerParams(),
             dims: RobotDims = RobotDims(), debug: bool = False) -> Path:
    """Plan from ``start`` to within ``goal_tolerance`` of ``goal``.

    ``bounds`` is ``(xmin, xmax, ymin, ymax)``. Runs all ``max_iters``
    iterations refining the best goal branch unless ``params.anytime`` is
    false. If the goal is never reached the branch to the node nearest the
    goal is returned with ``best_effort=True``.
    """
    xmin, xmax, ymin, ymax = bounds
    for p in (start, goal):
        if not (xmin <= p.x <= xmax and ymin <= p.y <= ymax):
            raise ValidationError(f"pose {p} outside planning bounds {bounds}")
    if not is_valid(start, grid, params, dims):
        raise PlanningError(f"start pose {start.as_tuple()} is not traversable "
                            f"(footprint CVaR {footprint_cvar(grid, start, dims):.3f} "
                            f"< {params.validity_threshold})")
    if math.hypot(goal.x - start.x, goal.y - start.y) <= _EPS:
        return Path([start], 0.0, iterations=0, nodes=1)

    rng = np.random.default_rng(params.seed)
    tree = _Tree(params.max_iters + 1, start)
    goal_nodes: list[int] = []
    history: list[float] = []
    best = math.inf
    if math.hypot(goal.x - start.x, goal.y - start.y) <= params.goal_tolerance:
        goal_nodes.append(0)
        best = 0.0

    # per-metre lower bound of the per-pose cost anywhere on the grid
    lb_rate = float(np.exp(-params.w1 * grid.cvar.max()) + params.w2 * np.exp(params.kappa_b - grid.count.max()))
    rewires: list[tuple[int, float, float]] = []
    hl, hw = dims.half_extents
    gx0, gx1, gy0, gy1 = grid.bounds
    kargs = (hl, hw, _window_radius(dims, grid.resolution), grid.resolution, grid.origin[0],
             grid.origin[1], grid.cvar, grid.count, grid.prior_cvar, params.w1, params.w2,
             params.kappa_b, params.validity_threshold, gx0, gx1, gy0, gy1)

    it = 0
    for it in range(1, params.max_iters + 1):
        if rng.random() < params.goal_bias:
            sx, sy, spsi = goal.x, goal.y, goal.psi
        else:
            sx = rng.uniform(xmin, xmax)
            sy = rng.uniform(ymin, ymax)
            spsi = rng.uniform(-math.pi, math.pi)

        n = tree.size
        near_i = _kernels.nearest(tree.xy, tree.psi, n, sx, sy, spsi, params.heading_weight)
        nx, ny = tree.xy[near_i]
        d = math.hypot(nx - sx, ny - sy)
        if d <= _EPS:
            if history:
                history.append(best)
            continue
        if d <= params.step:
            px, py = sx, sy
        else:
            px = nx + (sx - nx) * params.step / d
            py = ny + (sy - ny) * params.step / d
        new = PoseSE2(px, py, math.atan2(py - ny, px - nx))
        if not (xmin <= px <= xmax and ymin <= py <= ymax) or not is_valid(new, grid, params, dims):
            if history:
                history.append(best)
            continue

        # choose-parent over Near(r), then rewire the neighbours it improves
        parent, total, cand, cand_cost = _kernels.connect(
            tree.xy, tree.cost, n, px, py, params.rewire_radius, near_i, lb_rate, *kargs)
        if parent < 0:
            if history:
                history.append(best)
            continue
        pxy = tree.xy[parent]
        new_i = tree.add(px, py, math.atan2(py - pxy[1], px - pxy[0]), int(parent), float(total))
        c_new = tree.cost[new_i]
        for j, cj in zip(cand.tolist(), cand_cost.tolist()):
            if c_new + cj < tree.cost[j] - 1e-12:
                before = tree.cost[j]
                tree.reparent(j, new_i, c_new + cj)
                if debug:
                    assert tree.cost[j] < before
                    rewires.append((j, float(before), float(tree.cost[j])))

        if math.hypot(px - goal.x, py - goal.y) <= params.goal_tolerance:
            goal_nodes.append(new_i)
        if goal_nodes:
            best = float(min(tree.cost[g] for g in goal_nodes))
            history.append(best)
            if not params.anytime:
                break

    if goal_nodes:
        end = min(goal_nodes, key=lambda g: (tree.cost[g], g))
        best_effort = False
    else:
        gd = np.hypot(tree.xy[:tree.size, 0] - goal.x, tree.xy[:tree.size, 1] - goal.y)
        end = int(np.argmin(gd))
        best_effort = True
    idx = tree.branch(end)
    poses = [start]
    for a, b in zip(idx, idx[1:]):
        ax, ay = tree.xy[a]
        bx, by = tree.xy[b]
        poses.append(PoseSE2(float(bx), float(by), math.atan2(by - ay, bx - ax)))
    return Path(poses, float(tree.cost[end]), best_effort, it, history, tree.size, rewires)


def path_passes_through(path: Path, xmin: float, xmax: float, ymin: float, ymax: float,
                        resolution: float = 0.05) -> bool:
    """True if the polyline enters the axis-aligned box."""
    for a, b in zip(path.poses, path.poses[1:]):
        m = max(1, int(math.ceil(math.hypot(b.x - a.x, b.y - a.y) / resolution)))
        for t in np.linspace(0, 1, m + 1):
            x = a.x + t * (b.x - a.x)
            y = a.y + t * (b.y - a.y)
            if xmin <= x <= xmax and ymin <= y <= ymax:
                return True
    return False


def params_dict(p: PlannerParams) -> dict:
    return asdict(p)
