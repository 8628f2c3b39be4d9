"""Closed-loop episodes: camera -> segmentation -> oracle -> map -> planner -> MPPI.

The loop runs on simulated time at the control rate. At most one oracle
query is in flight; its reply is fused on the first tick at or after
``dispatch time + latency``, projected from the pose at dispatch.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Callable

import numpy as np

from .. import risk
from ..controller import ControlInput, MppiController, MppiParams, dynamics_step
from ..errors import OracleUnavailable, PlanningError, ValidationError
from ..mapping import RiskGrid, VoxelMap, compress_pillars, insert_observations
from ..nig import NigState
from ..oracle import (Camera, LatencyModel, MockOracle, OracleQuery, RobotDescription,
                      build_prompt, project_regions, query_with_retry)
from ..planner import (Path, PlannerParams, PoseSE2, RobotDims, _edge_batch, footprint_stats,
                       rrt_star)
from ..segmentation import number_masks, slic
from .render import render_view
from .world import WorldSpec, validate_start


@dataclass(frozen=True)
class SegmentParams:
    k: int = 48
    compactness: float = 10.0
    iters: int = 10


@dataclass(frozen=True)
class LoopParams:
    control_dt: float = 0.1
    goal_radius: float = 0.5
    query_min_interval: float = 2.0
    query_timer: float = 4.0
    frontier_trigger: float = 3.0
    replan_period: float = 5.0
    stall_window: float = 60.0
    stall_distance: float = 0.25
    time_limit: float | None = None  # None: the world's own limit
    projection: str = "cells"
    render_noise: float = 6.0

    def __post_init__(self):
        for name in ("control_dt", "goal_radius", "query_min_interval", "query_timer",
                     "replan_period", "stall_window"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"loop parameter {name} must be positive")


@dataclass(frozen=True)
class SimConfig:
    """Every tunable of an episode; defaults are the shipped configuration."""
    prior: NigState = NigState(gamma=0.5, kappa=1.0, a=1.0, b=0.05)
    level: float = risk.DEFAULT_LEVEL
    map_resolution: float = 0.1
    robot: RobotDescription = RobotDescription()
    camera: Camera = Camera()
    latency: LatencyModel = LatencyModel()
    segment: SegmentParams = SegmentParams()
    planner: PlannerParams = PlannerParams(max_iters=1500)
    mppi: MppiParams = MppiParams(samples=256, w1=5.0)
    loop: LoopParams = LoopParams()

    @property
    def dims(self) -> RobotDims:
        return RobotDims(self.robot.length, self.robot.width)


def config_to_dict(cfg: SimConfig) -> dict:
    return dataclasses.asdict(cfg)


def _build(cls, d):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ValidationError(f"expected a mapping for {cls.__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ValidationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {}
    for k, v in d.items():
        default = getattr(cls(), k)
        if dataclasses.is_dataclass(default):
            kw[k] = _build(type(default), v)
        elif isinstance(default, tuple) and isinstance(v, list):
            kw[k] = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        else:
            kw[k] = v
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ValidationError(str(exc)) from exc


def config_from_dict(d: dict | None) -> SimConfig:
    """Build a config from nested overrides; missing keys keep defaults."""
    d = dict(d or {})
    base = SimConfig()
    kw = {}
    for f in dataclasses.fields(SimConfig):
        if f.name not in d:
            continue
        v = d.pop(f.name)
        default = getattr(base, f.name)
        if dataclasses.is_dataclass(default):
            merged = {**dataclasses.asdict(default), **(v or {})}
            kw[f.name] = _build(type(default), merged)
        else:
            kw[f.name] = v
    if d:
        raise ValidationError(f"unknown config keys: {sorted(d)}")
    return SimConfig(**kw)


@dataclass
class EpisodeResult:
    world: str
    seed: int
    success: bool
    reason: str  # goal | timeout | stalled
    elapsed: float
    path_length: float
    min_traversability: float
    queries: int
    fused: int
    replans: int
    trace: str | None = None
    trace_sha256: str = ""
    final_map: VoxelMap | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d.pop("final_map")
        return d


def _num(v):
    if isinstance(v, (np.floating, np.integer)):
        v = v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def _jsonable(o):
    if isinstance(o, dict):
        return {k: _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    return _num(o)


@dataclass
class _Pending:
    qid: int
    t_query: float
    t_ready: float
    pose: PoseSE2
    observations: list
    latency: float


def _frontier_distance(path: Path | None, progress: float, grid: RiskGrid, step: float = 0.1) -> float:
    """Arc length from the robot's progress to the first unobserved cell on the path."""
    if path is None:
        return 0.0
    xy = np.array([[p.x, p.y] for p in path.poses])
    if len(xy) < 2:
        return math.inf if not path.best_effort else 0.0
    seg = np.diff(xy, axis=0)
    cum = np.concatenate([[0.0], np.cumsum(np.hypot(seg[:, 0], seg[:, 1]))])
    s = np.arange(progress, cum[-1] + 1e-9, step)
    if s.size == 0:
        return 0.0 if path.best_effort else math.inf
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    frac = (s - cum[idx]) / np.maximum(cum[idx + 1] - cum[idx], 1e-12)
    pts = xy[idx] + frac[:, None] * seg[idx]
    h, w = grid.shape
    col = np.floor((pts[:, 0] - grid.origin[0]) / grid.resolution).astype(int)
    row = np.floor((pts[:, 1] - grid.origin[1]) / grid.resolution).astype(int)
    ok = (col >= 0) & (col < w) & (row >= 0) & (row < h)
    seen = np.zeros(len(pts), dtype=bool)
    seen[ok] = grid.observed[row[ok], col[ok]]
    if not seen.all():
        return float(s[int(np.argmin(seen))] - progress)
    return float(cum[-1] - progress) if path.best_effort else math.inf


def _path_still_valid(path: Path, progress_xy: np.ndarray, grid: RiskGrid, params: PlannerParams,
                      dims: RobotDims) -> bool:
    xy = np.array([[p.x, p.y] for p in path.poses])
    if len(xy) < 2:
        return True
    # only the part ahead of the robot matters
    d = np.hypot(xy[:, 0] - progress_xy[0], xy[:, 1] - progress_xy[1])
    i0 = max(0, int(np.argmin(d)) - 1)
    if i0 >= len(xy) - 1:
        return True
    _, valid = _edge_batch(grid, xy[i0:-1], xy[i0 + 1:], params, dims)
    return bool(valid.all())


def _escape_path(pose: PoseSE2, grid: RiskGrid, params: PlannerParams, dims: RobotDims,
                 radii=(0.2, 0.4, 0.6, 0.8, 1.0, 1.2), n_dirs: int = 16) -> Path | None:
    """Short path to the nearest valid pose when the robot's own pose is invalid.

    Candidates sit on rings around the robot, headed along the escape
    direction; the first ring with a valid candidate wins, highest CVaR
    first.
    """
    ang = np.arange(n_dirs) * (2 * math.pi / n_dirs)
    for r in radii:
        xs = pose.x + r * np.cos(ang)
        ys = pose.y + r * np.sin(ang)
        cv, _ = footprint_stats(grid, xs, ys, ang, dims)
        xmin, xmax, ymin, ymax = grid.bounds
        ok = (cv >= params.validity_threshold) & (xs >= xmin) & (xs < xmax) & (ys >= ymin) & (ys < ymax)
        if ok.any():
            i = int(np.argmax(np.where(ok, cv, -np.inf)))
            return Path([pose, PoseSE2(float(xs[i]), float(ys[i]), float(ang[i]))], 0.0, best_effort=True)
    return None


def run_episode(world: WorldSpec, cfg: SimConfig = SimConfig(), seed: int = 0,
                out_dir=None, backend: Callable | None = None, time_limit: float | None = None
                ) -> EpisodeResult:
    """Run one episode; writes ``<out_dir>/<world>_seed<seed>.jsonl`` when given."""
    validate_start(world, cfg.planner.validity_threshold)
    lp = cfg.loop
    dims = cfg.dims
    limit = time_limit or lp.time_limit or world.time_limit
    ss = np.random.SeedSequence([int(seed), int(world.seed)])
    s_render, s_oracle, s_mppi, s_plan = ss.spawn(4)
    render_rng = np.random.default_rng(s_render)
    plan_rng = np.random.default_rng(s_plan)
    if backend is None:
        backend = MockOracle(world.terrain(), seed=int(s_oracle.generate_state(1)[0]),
                             latency=cfg.latency, resolution=cfg.map_resolution)
    mppi = MppiController(dataclasses.replace(cfg.mppi, seed=int(s_mppi.generate_state(1)[0])), dims)

    vmap = VoxelMap(resolution=cfg.map_resolution, prior=cfg.prior)
    gw = int(round(world.extents[0] / cfg.map_resolution))
    gh = int(round(world.extents[1] / cfg.map_resolution))
    z_top = 0.5 * cfg.map_resolution

    def compress(vm):
        return compress_pillars(vm, 0.0, z_top, extent=(0, 0, gw, gh), level=cfg.level)

    grid = compress(vmap)
    gt = RiskGrid(world.m[world.grid].astype(float), np.zeros(world.grid.shape),
                  np.ones(world.grid.shape, dtype=bool), world.resolution, (0.0, 0.0), 0.0)
    goal = PoseSE2(world.goal[0], world.goal[1], 0.0)

    pose = world.start
    t = 0.0
    tick = 0
    n_ticks = int(math.ceil(limit / lp.control_dt - 1e-9))
    pending: _Pending | None = None
    last_query = -math.inf
    queries = fused = replans = 0
    path: Path | None = None
    last_plan = -math.inf
    plan_revision = -1
    traveled = 0.0
    min_trav = math.inf
    history = [(0.0, pose.x, pose.y)]
    reason = "timeout"
    success = False
    lines: list[str] = []
    dist_goal = math.hypot(pose.x - goal.x, pose.y - goal.y)

    while True:
        events = []
        # (b) deliver a reply whose latency has elapsed
        if pending is not None and t >= pending.t_ready - 1e-9:
            obs = pending.observations
            if obs:
                vmap = insert_observations(vmap, obs)
                grid = compress(vmap)
                fused += 1
            events.append({"fuse": {"id": pending.qid, "t_query": pending.t_query,
                                    "latency": pending.latency, "samples": len(obs)}})
            pending = None

        # (d) replan on new information
        need = path is None or path.best_effort or t - last_plan >= lp.replan_period
        if vmap.revision != plan_revision and (need or not _path_still_valid(
                path, np.array([pose.x, pose.y]), grid, cfg.planner, dims)):
            plan_revision = vmap.revision
            params = dataclasses.replace(cfg.planner, seed=int(plan_rng.integers(2 ** 31)))
            try:
                new = rrt_star(pose, goal, world.bounds, grid, params, dims)
                path, last_plan = new, t
                replans += 1
                mppi.reset()
                events.append({"plan": {"cost": new.cost, "best_effort": new.best_effort,
                                        "poses": len(new.poses), "nodes": new.nodes}})
            except PlanningError as exc:
                events.append({"plan_failed": str(exc).split(" (")[0]})
                if path is not None and not _path_still_valid(path, np.array([pose.x, pose.y]),
                                                               grid, cfg.planner, dims):
                    path = None
                if path is None and grid.observed.any():
                    path = _escape_path(pose, grid, cfg.planner, dims)
                    if path is not None:
                        mppi.reset()
                        events.append({"escape": [path.poses[1].x, path.poses[1].y]})

        # (a) dispatch a query
        frontier = _frontier_distance(path, mppi.progress, grid)
        if pending is None and t - last_query >= lp.query_min_interval - 1e-9 and (
                path is None or frontier <= lp.frontier_trigger or t - last_query >= lp.query_timer - 1e-9):
            image = render_view(world, pose, cfg.camera, render_rng, lp.render_noise)
            labels = slic(image, cfg.segment.k, cfg.segment.compactness, cfg.segment.iters)
            annotated, reg = number_masks(labels, image)
            regions = project_regions(labels, cfg.camera, pose, cfg.map_resolution, mode=lp.projection)
            q = OracleQuery(annotated, len(reg), build_prompt(cfg.robot, len(reg)))
            try:
                reply, spent, _ = query_with_retry(backend, q, regions)
                unavailable = False
            except OracleUnavailable:
                # keep driving on the current map; the next query may succeed
                reply, spent, unavailable = None, 0.0, True
            obs = []
            if reply is not None:
                for rid, value in enumerate(reply.values, start=1):
                    if rid in reply.flags:
                        continue
                    obs.extend((key, value) for key in regions.get(rid, ()))
            queries += 1
            pending = _Pending(queries, t, t + spent, pose, obs, spent)
            last_query = t
            events.append({"query": {"id": queries, "regions": len(reg), "latency": spent,
                                     "dropped": reply is None, "unavailable": unavailable}})

        # (e) control
        if path is not None:
            ref = [[p.x, p.y] for p in path.poses]
            if not path.best_effort:
                # the planner stops within its tolerance; track through to the goal itself
                ref.append([goal.x, goal.y])
            u, diag = mppi.step(pose, np.array(ref), grid)
            best_cost = diag["best_cost"]
        else:
            u, best_cost = ControlInput(0.0, 0.0), None
        fcv, fcnt = footprint_stats(grid, [pose.x], [pose.y], [pose.psi], dims)
        gcv, _ = footprint_stats(gt, [pose.x], [pose.y], [pose.psi], dims)
        min_trav = min(min_trav, float(gcv[0]))

        rec = {"tick": tick, "t": round(t, 10), "pose": [pose.x, pose.y, pose.psi], "u": [u.v, u.omega],
               "cost": best_cost, "fp_count": float(fcnt[0]), "fp_cvar": float(fcv[0]),
               "gt": float(gcv[0]), "mode": "track" if path is not None else "hold", "rev": vmap.revision, "events": events}
        lines.append(json.dumps(_jsonable(rec), sort_keys=True))

        if dist_goal <= lp.goal_radius:
            success, reason = True, "goal"
            break
        if tick >= n_ticks:
            break
        if t >= lp.stall_window - 1e-9:
            # displacement over the stall window
            j = max(i for i, (ti, _, _) in enumerate(history) if ti <= t - lp.stall_window + 1e-9)
            if math.hypot(pose.x - history[j][1], pose.y - history[j][2]) < lp.stall_distance:
                reason = "stalled"
                break

        new_pose = dynamics_step(pose, u, lp.control_dt)
        if not world.contains(new_pose.x, new_pose.y):
            new_pose = PoseSE2(pose.x, pose.y, new_pose.psi)
        traveled += math.hypot(new_pose.x - pose.x, new_pose.y - pose.y)
        pose = new_pose
        tick += 1
        t = tick * lp.control_dt
        history.append((t, pose.x, pose.y))
        dist_goal = math.hypot(pose.x - goal.x, pose.y - goal.y)

    text = "\n".join(lines) + "\n"
    trace_path = None
    if out_dir is not None:
        out = FsPath(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        trace_path = out / f"{world.name}_seed{seed}.jsonl"
        trace_path.write_text(text)
    return EpisodeResult(world.name, int(seed), success, reason, round(t, 10), traveled,
                         min_trav, queries, fused, replans,
                         str(trace_path) if trace_path else None,
                         hashlib.sha256(text.encode()).hexdigest(), vmap)


def run_suite(worlds, seeds, cfg: SimConfig = SimConfig(), out_dir=None,
              backend_factory: Callable | None = None) -> dict:
    """Cross product of worlds and seeds; returns the summary and writes it when ``out_dir`` is set."""
    results = []
    for w in worlds:
        for s in seeds:
            be = backend_factory(w, s) if backend_factory else None
            results.append(run_episode(w, cfg, s, out_dir, backend=be))
    per_world = {}
    for r in results:
        d = per_world.setdefault(r.world, {"runs": 0, "successes": 0, "timeout": 0, "stalled": 0})
        d["runs"] += 1
        d["successes"] += int(r.success)
        if not r.success:
            d[r.reason] += 1
    summary = {"worlds": per_world, "episodes": [r.to_dict() for r in results]}
    if out_dir is not None:
        out = FsPath(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.json").write_text(json.dumps(_jsonable(summary), indent=1, sort_keys=True) + "\n")
        (out / "summary.txt").write_text(summary_table(summary))
    return summary


def summary_table(summary: dict) -> str:
    rows = [f"{'world':<14}{'success':>10}{'timeout':>10}{'stalled':>10}"]
    for name, d in summary["worlds"].items():
        rows.append(f"{name:<14}{d['successes']:>5}/{d['runs']:<4}{d['timeout']:>10}{d['stalled']:>10}")
    return "\n".join(rows) + "\n"
