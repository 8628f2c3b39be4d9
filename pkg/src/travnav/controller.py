"""MPPI path tracking on the risk grid.

Stage cost per rollout (inputs ``u_i``, states ``x_i``, references ``r_i``):

    sum_{i<N} |x_i - r_i|^2_Q + J_u(i)  +  |x_N - r_N|^2_QN  -  W1 sum_{i<=N} CVaR(x_i)

with the speed-conditioned action cost ``J_u(i) = |u_i - u_r (1 - exp((n0 - n_i) W2))|_R``
where ``n_i`` is the mean observation count under the footprint at ``x_i``.
Poorly observed ground lowers the speed target, so the robot slows down
where it has seen little.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .mapping import RiskGrid
from .planner import PoseSE2, RobotDims, footprint_stats, normalize_angle


@dataclass(frozen=True)
class ControlInput:
    v: float
    omega: float


@dataclass(frozen=True)
class MppiParams:
    horizon: int = 30
    samples: int = 512
    dt: float = 0.1
    temperature: float = 0.5
    q: tuple[float, float, float] = (2.0, 2.0, 0.2)
    q_terminal: tuple[float, float, float] = (10.0, 10.0, 0.5)
    r: tuple[float, float] = (1.0, 0.2)
    w1: float = 1.0
    w2: float = 0.2
    n0: float = 1.0
    noise_std: tuple[float, float] = (0.3, 0.5)
    v_ref: float = 0.8
    v_max: float = 1.0
    omega_max: float = 1.5
    # time the reference states with the same count-based speed factor
    condition_reference: bool = True
    reference_min_factor: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 1 or self.samples < 1:
            raise ValidationError("horizon and samples must be >= 1")
        for name in ("dt", "temperature", "v_max", "omega_max"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"MPPI parameter {name} must be positive")
        if not 0.0 < self.reference_min_factor <= 1.0:
            raise ValidationError("reference_min_factor must be in (0, 1]")
        if min(self.q + self.q_terminal + self.r + self.noise_std) < 0:
            raise ValidationError("MPPI weights must be non-negative")


@dataclass
class Trajectory:
    states: np.ndarray  # (N+1, 3)
    inputs: np.ndarray  # (N, 2)
    cost: float = 0.0


def dynamics_step(state: PoseSE2, u: ControlInput, dt: float) -> PoseSE2:
    """Unicycle model, explicit Euler."""
    if not dt > 0:
        raise ValidationError("dt must be positive")
    return PoseSE2(state.x + u.v * math.cos(state.psi) * dt,
                   state.y + u.v * math.sin(state.psi) * dt,
                   state.psi + u.omega * dt)


def rollout(state: PoseSE2, inputs: np.ndarray, dt: float) -> np.ndarray:
    """States (..., N+1, 3) for input sequences (..., N, 2); batched unicycle."""
    inputs = np.asarray(inputs, dtype=float)
    lead = inputs.shape[:-2]
    n = inputs.shape[-2]
    out = np.empty(lead + (n + 1, 3))
    x = np.full(lead, state.x)
    y = np.full(lead, state.y)
    p = np.full(lead, state.psi)
    out[..., 0, 0], out[..., 0, 1], out[..., 0, 2] = x, y, p
    for i in range(n):
        v = inputs[..., i, 0]
        x = x + v * np.cos(p) * dt
        y = y + v * np.sin(p) * dt
        p = normalize_angle(p + inputs[..., i, 1] * dt)
        out[..., i + 1, 0], out[..., i + 1, 1], out[..., i + 1, 2] = x, y, p
    return out


def speed_factor(n, n0: float, w2: float):
    """1 - exp((n0 - n) w2), floored at 0 below the count baseline."""
    return np.maximum(0.0, 1.0 - np.exp((n0 - np.asarray(n, dtype=float)) * w2))


def _batch_cost(states: np.ndarray, inputs: np.ndarray, refs: np.ndarray, grid: RiskGrid,
                params: MppiParams, dims: RobotDims) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-rollout cost, plus footprint cvar and counts at every state."""
    k, n1, _ = states.shape
    cv, cnt = footprint_stats(grid, states[..., 0], states[..., 1], states[..., 2], dims)
    cv = cv.reshape(k, n1)
    cnt = cnt.reshape(k, n1)

    err = states - refs[None]
    err[..., 2] = normalize_angle(err[..., 2])
    q = np.asarray(params.q)
    qn = np.asarray(params.q_terminal)
    track = (err[:, :-1] ** 2 * q).sum(axis=(1, 2))
    terminal = (err[:, -1] ** 2 * qn).sum(axis=1)

    target_v = params.v_ref * speed_factor(cnt[:, :-1], params.n0, params.w2)
    du_v = inputs[..., 0] - target_v
    du_w = inputs[..., 1]
    r = params.r
    action = np.sqrt(r[0] * du_v ** 2 + r[1] * du_w ** 2).sum(axis=1)

    risk = params.w1 * cv.sum(axis=1)
    return track + action + terminal - risk, cv, cnt


def trajectory_cost(traj: Trajectory, refs, grid: RiskGrid, params: MppiParams,
                    dims: RobotDims = RobotDims()) -> float:
    refs = np.asarray(refs, dtype=float)
    if refs.shape != traj.states.shape:
        raise ValidationError(f"need {traj.states.shape[0]} reference states, got {refs.shape[0]}")
    c, _, _ = _batch_cost(traj.states[None], traj.inputs[None], refs, grid, params, dims)
    return float(c[0])


def _path_arclength(path_xy: np.ndarray):
    seg = np.diff(path_xy, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    return seg, seg_len, np.concatenate([[0.0], np.cumsum(seg_len)])


def _path_points(path_xy: np.ndarray, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Positions and headings at arc lengths ``s`` (clamped to the path)."""
    seg, seg_len, cum = _path_arclength(path_xy)
    s = np.clip(s, 0.0, cum[-1])
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    frac = np.where(seg_len[idx] > 0, (s - cum[idx]) / np.where(seg_len[idx] > 0, seg_len[idx], 1.0), 0.0)
    return path_xy[idx] + frac[:, None] * seg[idx], np.arctan2(seg[idx, 1], seg[idx, 0])


def conditioned_spacing(path_xy: np.ndarray, s0: float, grid: RiskGrid, params: MppiParams,
                        dims: RobotDims, resolution: float = 0.02) -> np.ndarray:
    """Per-step reference spacing ``v_ref dt f(n)`` marched along the path.

    ``f`` is the count-based speed factor evaluated under the footprint at
    each reference point, floored at ``reference_min_factor``.
    """
    path_xy = np.asarray(path_xy, dtype=float)
    n = params.horizon
    full = params.v_ref * params.dt
    if len(path_xy) < 2:
        return np.full(n, full)
    s = s0 + np.arange(0.0, n * full + resolution, resolution)
    xy, head = _path_points(path_xy, s)
    _, cnt = footprint_stats(grid, xy[:, 0], xy[:, 1], head, dims)
    f = np.maximum(speed_factor(cnt, params.n0, params.w2), params.reference_min_factor)
    out = np.empty(n)
    cur = s0
    for i in range(n):
        fi = np.interp(cur, s, f)
        out[i] = full * fi
        cur += out[i]
    return out


def reference_states(path_xy: np.ndarray, state: PoseSE2, horizon: int, spacing,
                     start_s: float = 0.0) -> tuple[np.ndarray, float]:
    """Resample the path ahead of the robot.

    ``spacing`` is the arc length between consecutive references, a scalar
    or one value per step. Returns (refs of shape (horizon+1, 3), arc
    length of the projection).
    The projection never moves behind ``start_s`` so the reference does not
    snap back along self-approaching paths.
    """
    path_xy = np.asarray(path_xy, dtype=float)
    if len(path_xy) == 1:
        ref = np.tile([path_xy[0, 0], path_xy[0, 1], state.psi], (horizon + 1, 1))
        return ref, 0.0
    seg = np.diff(path_xy, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]

    # closest point on the polyline at or after start_s
    p = np.array([state.x, state.y])
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.clip(((p - path_xy[:-1]) * seg).sum(axis=1) / np.where(seg_len > 0, seg_len ** 2, 1.0), 0, 1)
    proj = path_xy[:-1] + t[:, None] * seg
    s_proj = cum[:-1] + t * seg_len
    d = np.hypot(proj[:, 0] - p[0], proj[:, 1] - p[1])
    d = np.where(s_proj >= start_s - 1e-9, d, np.inf)
    if np.all(np.isinf(d)):
        s0 = start_s
    else:
        s0 = float(s_proj[int(np.argmin(d))])

    steps = np.broadcast_to(np.asarray(spacing, dtype=float), (horizon,))
    s = np.minimum(s0 + np.concatenate([[0.0], np.cumsum(steps)]), total)
    xy, heading = _path_points(path_xy, s)
    return np.column_stack([xy, heading]), s0


@dataclass
class MppiController:
    """Stateful wrapper holding the warm-start sequence and RNG."""

    params: MppiParams = field(default_factory=MppiParams)
    dims: RobotDims = field(default_factory=RobotDims)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.params.seed)
        self.u_prev = np.zeros((self.params.horizon, 2))
        self.progress = 0.0

    def reset(self) -> None:
        self.u_prev[:] = 0.0
        self.progress = 0.0

    def step(self, state: PoseSE2, ref_path, grid: RiskGrid) -> tuple[ControlInput, dict]:
        path_xy = np.array([[p.x, p.y] for p in ref_path] if not isinstance(ref_path, np.ndarray) else ref_path)
        u, diag, self.u_prev, self.progress = mppi_step(
            state, path_xy, grid, self.params, self.rng, self.u_prev, self.dims, self.progress)
        return u, diag


def mppi_step(state: PoseSE2, path_xy: np.ndarray, grid: RiskGrid, params: MppiParams,
              rng: np.random.Generator, u_prev: np.ndarray | None = None,
              dims: RobotDims = RobotDims(), progress: float = 0.0):
    """One MPPI update.

    Returns (first input, diagnostics, updated nominal sequence, path progress).
    """
    path_xy = np.asarray(path_xy, dtype=float).reshape(-1, 2)
    if len(path_xy) == 0:
        raise ValidationError("reference path is empty")
    n, k = params.horizon, params.samples
    if u_prev is None:
        u_prev = np.zeros((n, 2))
    nominal = np.concatenate([u_prev[1:], u_prev[-1:]], axis=0)

    refs, s0 = reference_states(path_xy, state, n, params.v_ref * params.dt, progress)
    if params.condition_reference:
        refs, s0 = reference_states(path_xy, state, n,
                                    conditioned_spacing(path_xy, s0, grid, params, dims), progress)
    noise = rng.standard_normal((k, n, 2)) * np.asarray(params.noise_std)
    noise[0] = 0.0  # keep the shifted nominal among the candidates
    bounds = np.array([params.v_max, params.omega_max])
    inputs = np.clip(nominal[None] + noise, -bounds, bounds)

    states = rollout(state, inputs, params.dt)
    cost, cv, cnt = _batch_cost(states, inputs, refs, grid, params, dims)
    xmin, xmax, ymin, ymax = grid.bounds
    inside = ((states[..., 0] >= xmin) & (states[..., 0] < xmax)
              & (states[..., 1] >= ymin) & (states[..., 1] < ymax)).all(axis=1)
    cost = np.where(inside & np.isfinite(cost), cost, np.inf)

    here_cv, here_cnt = footprint_stats(grid, [state.x], [state.y], [state.psi], dims)
    diag = {"best_cost": None, "weight_entropy": 0.0, "footprint_count": float(here_cnt[0]),
            "footprint_cvar": float(here_cv[0]), "stalled": False}
    if not np.isfinite(cost).any():
        diag["stalled"] = True
        return ControlInput(0.0, 0.0), diag, np.zeros((n, 2)), s0

    w = mppi_weights(cost, params.temperature)
    new_seq = np.einsum("k,kij->ij", w, inputs)
    u0 = np.clip(new_seq[0], -bounds, bounds)
    nz = w[w > 0]
    diag["best_cost"] = float(cost.min())
    diag["weight_entropy"] = float(-(nz * np.log(nz)).sum())
    diag["v"] = float(u0[0])
    diag["omega"] = float(u0[1])
    diag["weights"] = w
    diag["states"] = states
    return ControlInput(float(u0[0]), float(u0[1])), diag, new_seq, s0


def mppi_weights(cost: np.ndarray, temperature: float) -> np.ndarray:
    """Softmin weights exp(-(c - min c)/lambda), normalised; inf costs get 0."""
    cost = np.asarray(cost, dtype=float)
    finite = np.isfinite(cost)
    w = np.zeros_like(cost)
    if not finite.any():
        return w
    z = -(cost[finite] - cost[finite].min()) / temperature
    z -= z.max()
    e = np.exp(z)
    w[finite] = e / e.sum()
    return w
