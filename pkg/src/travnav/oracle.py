"""Traversability oracle: prompt, reply parsing, mock backend, ground projection.

Any oracle backend is a callable ``backend(query, regions) -> OracleReply``
where ``regions`` maps region id to the voxels the region covers. The mock
backend uses ``regions`` to look up ground truth; the HTTP backend ignores it.
"""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import LengthError, ParseError, ValidationError
from .mapping import VoxelKey
from .planner import PoseSE2

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RobotDescription:
    width: float = 0.4
    length: float = 0.6
    height: float = 0.5
    locomotion: str = ("four-wheeled skid-steer ground robot; handles paved ground and short grass, "
                       "cannot climb steps, cross water or push through vegetation taller than 10 cm")
    references: tuple[tuple[str, float], ...] = (
        ("flat paved ground", 0.9),
        ("short grass", 0.7),
        ("obstacle such as a wall, tree trunk or dense bush", 0.05),
    )

    def __post_init__(self):
        if min(self.width, self.length, self.height) <= 0:
            raise ValidationError("robot dimensions must be positive")
        if len(self.references) < 2:
            raise ValidationError("need at least two reference terrains")
        for name, v in self.references:
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"reference value for {name!r} outside [0, 1]: {v}")


@dataclass(frozen=True)
class RegionObservation:
    region: int
    value: float
    voxels: tuple[VoxelKey, ...]


@dataclass(frozen=True)
class OracleQuery:
    image: np.ndarray  # annotated RGB
    n_regions: int
    prompt: str


@dataclass(frozen=True)
class OracleReply:
    values: tuple[float, ...]
    latency: float
    flags: Mapping[int, str] = field(default_factory=dict)  # region id -> diagnostic


Backend = Callable[[OracleQuery, Mapping[int, Sequence[VoxelKey]]], OracleReply]


# -- prompt / reply -------------------------------------------------------

def build_prompt(robot: RobotDescription, n_regions: int) -> str:
    if n_regions < 1:
        raise ValidationError("n_regions must be >= 1")
    refs = "\n".join(f"- {name}: {value:g}" for name, value in robot.references)
    if n_regions == 1:
        regions = "The image shows 1 numbered region (region 1)."
        contract = "Reply with a list of 1 number in [0, 1] for region 1, for example [0.5], and nothing else."
    else:
        regions = f"The image shows {n_regions} numbered regions (1 to {n_regions})."
        contract = (f"Reply with a list of {n_regions} numbers in [0, 1], one per numbered region in "
                    f"order 1 to {n_regions}, for example [{', '.join(['0.5'] * min(n_regions, 3))}"
                    f"{', ...' if n_regions > 3 else ''}], and nothing else.")
    return (
        "You are rating how traversable the ground is for a mobile robot.\n"
        f"Robot size: width {robot.width:g} m, length {robot.length:g} m, height {robot.height:g} m.\n"
        f"Locomotion: {robot.locomotion}.\n"
        "Traversability is a number between 0 (impassable) and 1 (easy and safe to drive on).\n"
        f"Reference terrains and their values:\n{refs}\n"
        f"{regions} Each region is outlined and labelled with its number.\n"
        "Estimate the traversability of every region for this robot.\n"
        f"{contract}"
    )


_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_LIST = re.compile(r"\[\s*(" + _NUM + r"(?:\s*,\s*" + _NUM + r")*)\s*,?\s*\]")


def parse_reply(text: str, n_regions: int, diagnostics: dict | None = None) -> list[float]:
    """First bracketed numeric list in ``text``, clamped to [0, 1].

    ``diagnostics`` (if given) receives ``clamped``: indices of clamped values.
    """
    m = _LIST.search(text or "")
    if m is None:
        raise ParseError("no bracketed numeric list in reply")
    raw = [float(s) for s in re.findall(_NUM, m.group(1))]
    if len(raw) != n_regions:
        raise LengthError(f"expected {n_regions} values, got {len(raw)}")
    out = [min(max(v, 0.0), 1.0) for v in raw]
    if diagnostics is not None:
        diagnostics["clamped"] = [i for i, (a, b) in enumerate(zip(raw, out)) if a != b]
    return out


def query_with_retry(backend: Backend, query: OracleQuery,
                     regions: Mapping[int, Sequence[VoxelKey]]) -> tuple[OracleReply | None, float, int]:
    """Query once, re-query once on a malformed reply, then give up.

    Returns (reply or None, total latency spent, attempts).
    """
    spent = 0.0
    for attempt in (1, 2):
        try:
            reply = backend(query, regions)
        except (ParseError, LengthError) as exc:
            spent += getattr(exc, "latency", 0.0)
            log.warning("oracle reply rejected (attempt %d): %s", attempt, exc)
            continue
        return reply, spent + reply.latency, attempt
    log.warning("dropping observation batch after re-query")
    return None, spent, 2


# -- camera and ground projection -----------------------------------------

@dataclass(frozen=True)
class Camera:
    """Pinhole camera rigidly mounted on the robot, looking forward and down.

    ``offset`` is the mount position along the robot's heading (negative is
    behind the centre), ``mount_height`` its height above the ground plane.
    """
    width: int = 128
    height: int = 96
    hfov_deg: float = 90.0
    mount_height: float = 1.5
    pitch_deg: float = 45.0
    offset: float = -0.5
    max_range: float = 10.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValidationError("image size must be positive")
        if not 0 < self.hfov_deg < 180:
            raise ValidationError("hfov must be in (0, 180) degrees")
        if not self.mount_height > 0:
            raise ValidationError("camera must be above the ground plane")
        if not self.max_range > 0:
            raise ValidationError("max range must be positive")

    @property
    def focal(self) -> float:
        return 0.5 * self.width / math.tan(math.radians(self.hfov_deg) / 2)

    def _axes(self, psi: float):
        th = math.radians(self.pitch_deg)
        c, s = math.cos(psi), math.sin(psi)
        fwd = np.array([math.cos(th) * c, math.cos(th) * s, -math.sin(th)])
        left = np.array([-s, c, 0.0])
        up = np.array([math.sin(th) * c, math.sin(th) * s, math.cos(th)])
        return fwd, left, up

    def position(self, pose: PoseSE2) -> np.ndarray:
        return np.array([pose.x + self.offset * math.cos(pose.psi),
                         pose.y + self.offset * math.sin(pose.psi), self.mount_height])

    def rays(self, pose: PoseSE2, rows=None, cols=None) -> np.ndarray:
        """World-frame ray directions through pixel centres, shape (..., 3)."""
        if rows is None:
            rows, cols = np.mgrid[0:self.height, 0:self.width]
        u = np.asarray(cols, dtype=float) + 0.5 - self.width / 2
        v = np.asarray(rows, dtype=float) + 0.5 - self.height / 2
        fwd, left, up = self._axes(pose.psi)
        return self.focal * fwd + (-u)[..., None] * left + (-v)[..., None] * up

    def ground_hits(self, pose: PoseSE2, rows=None, cols=None):
        """Ray/ground intersections: (xy (..., 2), hit mask, horizontal range)."""
        d = self.rays(pose, rows, cols)
        cam = self.position(pose)
        dz = d[..., 2]
        hit = dz < -1e-12
        t = np.where(hit, -cam[2] / np.where(hit, dz, -1.0), np.nan)
        xy = cam[:2] + t[..., None] * d[..., :2]
        rng = np.hypot(xy[..., 0] - cam[0], xy[..., 1] - cam[1])
        return xy, hit, rng

    def project(self, pose: PoseSE2, xyz: np.ndarray):
        """World points (..., 3) to fractional pixel (row, col) plus in-front mask."""
        fwd, left, up = self._axes(pose.psi)
        rel = np.asarray(xyz, dtype=float) - self.position(pose)
        zf = rel @ fwd
        front = zf > 1e-9
        zf_safe = np.where(front, zf, 1.0)
        col = -(rel @ left) * self.focal / zf_safe + self.width / 2
        row = -(rel @ up) * self.focal / zf_safe + self.height / 2
        return row, col, front


def project_regions(labels: np.ndarray, camera: Camera, pose: PoseSE2, resolution: float = 0.1,
                    origin: tuple[float, float] = (0.0, 0.0), mode: str = "rays",
                    ) -> dict[int, list[VoxelKey]]:
    """Ground voxels seen by each region, on a flat ground plane.

    ``rays`` casts one ray per pixel and bins the hits. ``cells`` instead
    projects every ground cell centre within range into the image and takes
    the label there, which covers distant cells that fall between pixel
    rays. Either way, only voxels whose centre lies within ``max_range``
    (horizontal distance from the camera) are kept. Lists are sorted.
    """
    labels = np.asarray(labels)
    if labels.shape != (camera.height, camera.width):
        raise ValidationError(f"label map {labels.shape} does not match camera "
                              f"{(camera.height, camera.width)}")
    cam = camera.position(pose)
    ox, oy = origin
    if mode == "rays":
        xy, hit, _ = camera.ground_hits(pose)
        ix = np.floor((xy[..., 0] - ox) / resolution)
        iy = np.floor((xy[..., 1] - oy) / resolution)
        ok = hit & np.isfinite(ix) & np.isfinite(iy)
        ix, iy, lab = ix[ok].astype(np.int64), iy[ok].astype(np.int64), labels[ok]
    elif mode == "cells":
        r = camera.max_range
        i0, i1 = math.floor((cam[0] - r - ox) / resolution), math.floor((cam[0] + r - ox) / resolution)
        j0, j1 = math.floor((cam[1] - r - oy) / resolution), math.floor((cam[1] + r - oy) / resolution)
        jj, ii = np.mgrid[j0:j1 + 1, i0:i1 + 1]
        pts = np.stack([ox + (ii + 0.5) * resolution, oy + (jj + 0.5) * resolution,
                        np.zeros(ii.shape)], axis=-1)
        row, col, front = camera.project(pose, pts)
        inside = front & (row >= 0) & (row < camera.height) & (col >= 0) & (col < camera.width)
        rr = np.floor(np.where(inside, row, 0)).astype(np.int64)
        cc = np.floor(np.where(inside, col, 0)).astype(np.int64)
        ix, iy, lab = ii[inside], jj[inside], labels[rr[inside], cc[inside]]
    else:
        raise ValidationError(f"unknown projection mode {mode!r}")

    cx = ox + (ix + 0.5) * resolution
    cy = oy + (iy + 0.5) * resolution
    near = np.hypot(cx - cam[0], cy - cam[1]) <= camera.max_range
    ix, iy, lab = ix[near], iy[near], lab[near]
    out: dict[int, list[VoxelKey]] = {}
    if lab.size:
        trip = np.unique(np.column_stack([lab, ix, iy]), axis=0)
        for l, a, b in trip:
            out.setdefault(int(l), []).append(VoxelKey(int(a), int(b), 0))
    return out


# -- mock oracle -----------------------------------------------------------

@dataclass(frozen=True)
class LatencyModel:
    """Lognormal latency in seconds, truncated at ``cap``.

    Defaults put about 80% of draws between 1 and 2.5 s with a thin tail to
    the cap. ``zero=True`` returns 0 for unit tests.
    """
    median: float = 1.6
    sigma: float = 0.35
    cap: float = 5.0
    zero: bool = False

    def draw(self, rng: np.random.Generator) -> float:
        if self.zero:
            return 0.0
        return float(min(self.cap, rng.lognormal(math.log(self.median), self.sigma)))


@dataclass(frozen=True)
class TerrainField:
    """Ground-truth terrain: a class id per cell plus per-class (m, sigma)."""
    classes: np.ndarray  # [row=iy, col=ix]
    resolution: float
    origin: tuple[float, float]
    m: np.ndarray
    sigma: np.ndarray

    def lookup(self, xy: np.ndarray) -> np.ndarray:
        """Class id at world points; -1 outside the field."""
        xy = np.asarray(xy, dtype=float)
        col = np.floor((xy[..., 0] - self.origin[0]) / self.resolution)
        row = np.floor((xy[..., 1] - self.origin[1]) / self.resolution)
        h, w = self.classes.shape
        ok = (col >= 0) & (col < w) & (row >= 0) & (row < h)
        out = np.full(xy.shape[:-1], -1, dtype=np.int64)
        out[ok] = self.classes[row[ok].astype(np.int64), col[ok].astype(np.int64)]
        return out


def mock_query(terrain: TerrainField, regions: Mapping[int, Sequence[VoxelKey]],
               rng: np.random.Generator, latency: LatencyModel = LatencyModel(),
               resolution: float = 0.1, origin: tuple[float, float] = (0.0, 0.0),
               prior_mean: float = 0.5, n_regions: int | None = None) -> OracleReply:
    """One sample per region from the area-weighted ground-truth Gaussian.

    Region ids are 1..n_regions (default: the largest key). A region whose
    voxels all fall outside the terrain gets ``prior_mean`` and a flag.
    """
    n = n_regions if n_regions is not None else (max(regions) if regions else 0)
    values = []
    flags = {}
    for rid in range(1, n + 1):
        keys = regions.get(rid, ())
        cls = np.empty(0, dtype=np.int64)
        if len(keys):
            k = np.asarray([(kk[0], kk[1]) for kk in keys], dtype=float)
            xy = np.column_stack([origin[0] + (k[:, 0] + 0.5) * resolution,
                                  origin[1] + (k[:, 1] + 0.5) * resolution])
            cls = terrain.lookup(xy)
            cls = cls[cls >= 0]
        if cls.size == 0:
            values.append(prior_mean)
            flags[rid] = "no-coverage"
            continue
        mbar = float(terrain.m[cls].mean())
        sbar = float(terrain.sigma[cls].mean())
        x = mbar + sbar * rng.standard_normal() if sbar > 0 else mbar
        values.append(min(max(x, 0.0), 1.0))
    return OracleReply(tuple(values), latency.draw(rng), flags)


class MockOracle:
    """Seeded mock backend bound to a terrain field."""

    def __init__(self, terrain: TerrainField, seed: int = 0, latency: LatencyModel = LatencyModel(),
                 resolution: float = 0.1, origin=(0.0, 0.0)):
        self.terrain = terrain
        self.rng = np.random.default_rng(seed)
        self.latency = latency
        self.resolution = resolution
        self.origin = origin

    def __call__(self, query: OracleQuery, regions: Mapping[int, Sequence[VoxelKey]]) -> OracleReply:
        return mock_query(self.terrain, regions, self.rng, self.latency, self.resolution,
                          self.origin, n_regions=query.n_regions)
