"""SLIC superpixels and numbered visual markers.

Labels are 1-based so they can be printed on the image and referenced by
number in the oracle prompt.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from . import _kernels
from .errors import ValidationError

# sRGB (D65) -> XYZ
_RGB2XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_WHITE_D65 = np.array([0.95047, 1.0, 1.08883])


def rgb_to_lab(image: np.ndarray) -> np.ndarray:
    """CIE Lab of an RGB image (uint8 or float in [0, 1])."""
    rgb = np.asarray(image)
    rgb = rgb.astype(float) / 255.0 if rgb.dtype == np.uint8 else rgb.astype(float)
    lin = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = lin @ _RGB2XYZ.T / _WHITE_D65
    eps, kappa = 216 / 24389, 24389 / 27
    f = np.where(xyz > eps, np.cbrt(xyz), (kappa * xyz + 16) / 116)
    L = 116 * f[..., 1] - 16
    a = 500 * (f[..., 0] - f[..., 1])
    b = 200 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def _grid_shape(h: int, w: int, k: int) -> tuple[int, int]:
    """Seed grid (rows, cols) with rows*cols closest to k and near-square cells."""
    best = None
    for ny in range(1, min(h, k) + 1):
        nx = min(w, max(1, int(round(k / ny))))
        score = (abs(ny * nx - k), abs(np.log((w / nx) / (h / ny))))
        if best is None or score < best[0]:
            best = (score, ny, nx)
    return best[1], best[2]


def slic(image: np.ndarray, k: int = 48, compactness: float = 10.0, iters: int = 10) -> np.ndarray:
    """Simple linear iterative clustering.

    Returns an int32 label map with ids ``1..N``, numbered in raster order of
    first appearance. Fully deterministic: centres start on a regular grid
    and ties go to the lower centre index.
    """
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] == 0 or img.shape[1] == 0:
        raise ValidationError("expected a non-empty HxWx3 RGB image")
    h, w = img.shape[:2]
    if k < 1:
        raise ValidationError("k must be >= 1")
    if k > h * w:
        raise ValidationError(f"k={k} exceeds pixel count {h * w}")
    if k == 1:
        return np.ones((h, w), dtype=np.int32)

    lab = rgb_to_lab(img)
    ny, nx = _grid_shape(h, w, k)
    step = np.sqrt(h * w / (ny * nx))
    # pixel (r, c) sits at (r + 0.5, c + 0.5)
    rr, cc = np.mgrid[0:h, 0:w].astype(float) + 0.5
    cy = (np.arange(ny) + 0.5) * h / ny
    cx = (np.arange(nx) + 0.5) * w / nx
    centers_yx = np.array([(y, x) for y in cy for x in cx])
    centers_yx = _perturb_to_low_gradient(lab, centers_yx)
    iy = np.clip(centers_yx[:, 0].astype(int), 0, h - 1)
    ix = np.clip(centers_yx[:, 1].astype(int), 0, w - 1)
    centers = np.column_stack([lab[iy, ix], centers_yx])

    m2 = (compactness / step) ** 2
    win = int(np.ceil(step))
    labels = np.zeros((h, w), dtype=np.int64)
    for _ in range(max(1, iters)):
        dist = np.full((h, w), np.inf)
        for i, (L, a, b, y, x) in enumerate(centers):
            y0, y1 = max(0, int(y - win)), min(h, int(y + win) + 1)
            x0, x1 = max(0, int(x - win)), min(w, int(x + win) + 1)
            if y0 >= y1 or x0 >= x1:
                continue
            patch = lab[y0:y1, x0:x1]
            dc = ((patch - (L, a, b)) ** 2).sum(axis=-1)
            ds = (rr[y0:y1, x0:x1] - y) ** 2 + (cc[y0:y1, x0:x1] - x) ** 2
            d = dc + ds * m2
            better = d < dist[y0:y1, x0:x1]
            dist[y0:y1, x0:x1][better] = d[better]
            labels[y0:y1, x0:x1][better] = i
        # pixels outside every window (only possible on tiny images) join the nearest centre
        if np.isinf(dist).any():
            miss = np.isinf(dist)
            dd = (rr[miss, None] - centers[None, :, 3]) ** 2 + (cc[miss, None] - centers[None, :, 4]) ** 2
            labels[miss] = np.argmin(dd, axis=1)
        feats = np.concatenate([lab, rr[..., None], cc[..., None]], axis=-1).reshape(-1, 5)
        flat = labels.ravel()
        counts = np.bincount(flat, minlength=len(centers)).astype(float)
        sums = np.stack([np.bincount(flat, weights=feats[:, j], minlength=len(centers)) for j in range(5)], 1)
        keep = counts > 0
        centers[keep] = sums[keep] / counts[keep, None]

    labels = enforce_connectivity(labels)
    return relabel_sequential(labels)


def _perturb_to_low_gradient(lab: np.ndarray, centers_yx: np.ndarray) -> np.ndarray:
    """Move each seed to the lowest-gradient pixel of its 3x3 neighbourhood."""
    h, w = lab.shape[:2]
    if h < 3 or w < 3:
        return centers_yx
    grad = np.zeros((h, w))
    grad[1:-1, 1:-1] = (((lab[2:, 1:-1] - lab[:-2, 1:-1]) ** 2).sum(-1)
                        + ((lab[1:-1, 2:] - lab[1:-1, :-2]) ** 2).sum(-1))
    out = centers_yx.copy()
    for i, (y, x) in enumerate(centers_yx):
        r0, c0 = int(y), int(x)
        best = (grad[min(max(r0, 0), h - 1), min(max(c0, 0), w - 1)], 0, 0)
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                r, c = r0 + dr, c0 + dc
                if 1 <= r < h - 1 and 1 <= c < w - 1 and grad[r, c] < best[0]:
                    best = (grad[r, c], dr, dc)
        out[i] = (y + best[1], x + best[2])
    return out


def enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Merge orphan components into their dominant 4-neighbour.

    An orphan is any 4-connected piece of a label other than its largest
    one. It takes the neighbouring label it shares the longest boundary
    with; smaller orphans are merged first.
    """
    labels = np.ascontiguousarray(labels, dtype=np.int64).copy()
    for _ in range(10):
        if _kernels.merge_orphans(labels) == 0:
            break
    return labels


def relabel_sequential(labels: np.ndarray) -> np.ndarray:
    """Renumber to 1..N in raster order of first appearance."""
    _, first, inv = np.unique(labels.ravel(), return_index=True, return_inverse=True)
    rank = np.empty(first.size, dtype=np.int32)
    rank[np.argsort(first, kind="stable")] = np.arange(1, first.size + 1, dtype=np.int32)
    return rank[inv].reshape(labels.shape)


def check_partition(labels: np.ndarray) -> int:
    """Raise unless ``labels`` uses exactly the ids 1..N; return N."""
    ids = np.unique(labels)
    n = int(ids.max()) if ids.size else 0
    if ids.size == 0 or ids[0] != 1 or not np.array_equal(ids, np.arange(1, n + 1)):
        raise ValidationError("label map is not a partition into ids 1..N")
    return n


@dataclass(frozen=True)
class RegionInfo:
    id: int
    centroid: tuple[float, float]  # (row, col), pixel-centre convention
    marker: tuple[int, int]  # (row, col) of the pixel the id is drawn at
    pixel_count: int
    bbox: tuple[int, int, int, int]  # (row_min, col_min, row_max, col_max), inclusive


def region_registry(labels: np.ndarray) -> dict[int, RegionInfo]:
    n = check_partition(labels)
    reg = {}
    for i in range(1, n + 1):
        rows, cols = np.nonzero(labels == i)
        cy = rows.mean() + 0.5
        cx = cols.mean() + 0.5
        r, c = int(np.floor(cy)), int(np.floor(cx))
        if not (0 <= r < labels.shape[0] and 0 <= c < labels.shape[1] and labels[r, c] == i):
            # centroid falls outside a concave region: nearest member pixel
            d = (rows + 0.5 - cy) ** 2 + (cols + 0.5 - cx) ** 2
            j = int(np.argmin(d))
            r, c = int(rows[j]), int(cols[j])
        reg[i] = RegionInfo(i, (float(cy), float(cx)), (r, c), int(rows.size),
                            (int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max())))
    return reg


def number_masks(labels: np.ndarray, image: np.ndarray) -> tuple[np.ndarray, dict[int, RegionInfo]]:
    """Draw region boundaries and ids onto a copy of the image."""
    img = np.asarray(image)
    if img.shape[:2] != labels.shape:
        raise ValidationError("label map and image sizes differ")
    reg = region_registry(labels)
    out = img.astype(np.uint8).copy() if img.dtype == np.uint8 else (np.clip(img, 0, 1) * 255).astype(np.uint8)
    edge = np.zeros(labels.shape, dtype=bool)
    edge[:, 1:] |= labels[:, 1:] != labels[:, :-1]
    edge[1:, :] |= labels[1:, :] != labels[:-1, :]
    out[edge] = (255, 255, 255)
    pil = Image.fromarray(out)
    draw = ImageDraw.Draw(pil)
    font = ImageFont.load_default()
    for info in reg.values():
        text = str(info.id)
        l, t, r, b = draw.textbbox((0, 0), text, font=font)
        tw, th = r - l, b - t
        x = info.marker[1] - tw // 2
        y = info.marker[0] - th // 2
        draw.rectangle((x - 1, y - 1, x + tw + 1, y + th + 1), fill=(0, 0, 0))
        draw.text((x - l, y - t), text, fill=(255, 255, 255), font=font)
    return np.asarray(pil), reg


def save_registry(reg: dict[int, RegionInfo], path) -> None:
    with open(path, "w") as f:
        json.dump({"regions": [asdict(v) for v in reg.values()]}, f, indent=1)


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"))


def save_png(image: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)
