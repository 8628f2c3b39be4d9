"""Synthetic camera: perspective view of the flat terrain grid."""
from __future__ import annotations

import numpy as np

from ..oracle import Camera
from ..planner import PoseSE2
from .world import WorldSpec

SKY = -1
OFF_WORLD = -2
SKY_COLOR = (150, 190, 230)
OFF_WORLD_COLOR = (25, 25, 25)


def render_classes(world: WorldSpec, pose: PoseSE2, camera: Camera) -> np.ndarray:
    """Terrain class seen through each pixel (SKY / OFF_WORLD where none).

    Uses the same ray model as :func:`travnav.oracle.project_regions`.
    """
    xy, hit, _ = camera.ground_hits(pose)
    out = np.full(hit.shape, SKY, dtype=np.int64)
    cls = world.terrain().lookup(np.where(hit[..., None], xy, 0.0))
    out[hit] = np.where(cls[hit] >= 0, cls[hit], OFF_WORLD)
    return out


def render_view(world: WorldSpec, pose: PoseSE2, camera: Camera,
                rng: np.random.Generator | None = None, noise: float = 6.0) -> np.ndarray:
    """RGB uint8 image; each class in its display colour plus per-pixel noise."""
    if not world.contains(pose.x, pose.y):
        raise ValueError(f"pose {pose.as_tuple()} outside the world")
    cls = render_classes(world, pose, camera)
    palette = np.vstack([world.colors, [OFF_WORLD_COLOR, SKY_COLOR]])
    img = palette[np.where(cls >= 0, cls, len(world.classes) + (cls == SKY))]
    if rng is not None and noise > 0:
        img = img + rng.normal(0.0, noise, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)
