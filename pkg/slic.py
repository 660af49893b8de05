"""
SLIC superpixels, the classical comparison baseline.

Grid-seeded k-means in (L, a, b, y, x) restricted to a 2S x 2S window around
each center, with D = sqrt(d_lab^2 + (d_xy * m / S)^2). Seeding is fully
deterministic.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List

import numpy as np
from skimage import color

from config import SlicConfig
from errors import ParameterError, UsageError
from spix_core import SuperpixelMap, enforce_connectivity

logger = logging.getLogger(__name__)


@dataclass
class SlicResult:
    superpixels: SuperpixelMap
    centers: np.ndarray
    residuals: List[float] = field(default_factory=list)
    interval: float = 0.0


def grid_shape(K: int, H: int, W: int):
    """Seed rows and columns for about K square-ish cells"""
    rows = max(1, int(round(math.sqrt(K * H / W))))
    cols = max(1, int(round(K / rows)))
    return min(rows, H), min(cols, W)


def _gradient(lab: np.ndarray) -> np.ndarray:
    padded = np.pad(lab, ((1, 1), (1, 1), (0, 0)), mode="edge")
    dy = padded[2:, 1:-1] - padded[:-2, 1:-1]
    dx = padded[1:-1, 2:] - padded[1:-1, :-2]
    return (dy ** 2).sum(axis=2) + (dx ** 2).sum(axis=2)


def _perturb(y: int, x: int, gradient: np.ndarray):
    """Move a seed to the lowest-gradient pixel of its 3x3 neighbourhood (ties stay put)"""
    h, w = gradient.shape
    best_y, best_x, best = y, x, gradient[y, x]
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w and gradient[ny, nx] < best:
                best_y, best_x, best = ny, nx, gradient[ny, nx]
    return best_y, best_x


def slic(image: np.ndarray, cfg: SlicConfig) -> SlicResult:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3 or image.size == 0:
        raise UsageError(f"slic needs a non-empty H x W x 3 image, got {image.shape}")
    cfg.validate()
    h, w = image.shape[:2]
    if cfg.K > h * w:
        raise ParameterError(f"K = {cfg.K} exceeds the pixel count {h * w}")

    lab = color.rgb2lab(image)
    S = math.sqrt(h * w / cfg.K)
    rows, cols = grid_shape(cfg.K, h, w)
    gradient = _gradient(lab)

    centers = []
    for i in range(rows):
        for j in range(cols):
            y, x = _perturb(int((i + 0.5) * h / rows), int((j + 0.5) * w / cols), gradient)
            centers.append([*lab[y, x], y, x])
    centers = np.asarray(centers)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    labels = (np.arange(h)[:, None] * rows // h) * cols + (np.arange(w)[None, :] * cols // w)
    spatial_weight = (cfg.compactness / S) ** 2
    residuals: List[float] = []

    for iteration in range(cfg.iterations):
        distance = np.full((h, w), np.inf)
        for k, (l, a, b, cy, cx) in enumerate(centers):
            y0, y1 = max(0, int(cy - S)), min(h, int(cy + S) + 1)
            x0, x1 = max(0, int(cx - S)), min(w, int(cx + S) + 1)
            patch = lab[y0:y1, x0:x1]
            d_lab = ((patch - np.array([l, a, b])) ** 2).sum(axis=2)
            d_xy = (yy[y0:y1, x0:x1] - cy) ** 2 + (xx[y0:y1, x0:x1] - cx) ** 2
            d = d_lab + d_xy * spatial_weight
            closer = d < distance[y0:y1, x0:x1]
            distance[y0:y1, x0:x1][closer] = d[closer]
            labels[y0:y1, x0:x1][closer] = k

        flat = labels.ravel()
        counts = np.bincount(flat, minlength=len(centers)).astype(np.float64)
        features = np.concatenate([lab, yy[..., None], xx[..., None]], axis=2).reshape(-1, 5)
        sums = np.stack([np.bincount(flat, weights=features[:, c], minlength=len(centers)) for c in range(5)], axis=1)
        updated = centers.copy()
        occupied = counts > 0
        updated[occupied] = sums[occupied] / counts[occupied, None]
        residuals.append(float(np.sqrt(((updated[:, 3:] - centers[:, 3:]) ** 2).sum(axis=1)).mean()))
        centers = updated

    logger.debug(f"slic K={cfg.K} S={S:.2f} residuals={[round(r, 4) for r in residuals]}")
    min_size = max(1, int(S * S / 16))
    return SlicResult(enforce_connectivity(labels, min_size), centers, residuals, S)
