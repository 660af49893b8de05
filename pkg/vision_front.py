"""
Biologically inspired label machinery.

Contrast sensitivity, pixel-to-boundary distance fields and the Boundary-Aware
Label (BAL) encoding, plus the cross-entropy analyses used to pick the label
layout. BAL turns each ground-truth category into a discretized Gaussian over
label channels whose width grows as the pixel approaches an object boundary.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Union

import numpy as np
import pandas as pd
from sklearn.linear_model import LinearRegression
from sklearn.metrics import r2_score

from config import BalConfig
from errors import CategoryOverflowError, ParameterError, UsageError

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Contrast sensitivity
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CsfQuery:
    """Spatial frequency in cycles/degree along each axis"""

    f_x: float
    f_y: float = 0.0

    @property
    def f(self) -> float:
        return math.hypot(self.f_x, self.f_y)


def _csf(f):
    scaled = 0.114 * f
    return 2.6 * (0.192 + scaled) * np.exp(-np.power(scaled, 1.1))


def csf_eval(q: Union[CsfQuery, float]) -> float:
    """Contrast sensitivity H(f) = 2.6(0.192 + 0.114f)exp(-(0.114f)^1.1)"""
    if isinstance(q, CsfQuery):
        if not (math.isfinite(q.f_x) and math.isfinite(q.f_y)):
            raise ParameterError(f"spatial frequency must be finite, got ({q.f_x}, {q.f_y})")
        f = q.f
    else:
        f = float(q)
        if not math.isfinite(f) or f < 0:
            raise ParameterError(f"spatial frequency must be finite and >= 0, got {f}")
    return float(_csf(np.float64(f)))


def csf_curve(max_f: float = 60.0, step: float = 0.5) -> pd.DataFrame:
    """Tabulate H(f) on [0, max_f] with the given step"""
    if step <= 0 or max_f < 0 or not math.isfinite(max_f):
        raise ParameterError(f"need step > 0 and finite max_f >= 0, got step={step}, max_f={max_f}")
    count = int(round(max_f / step)) + 1
    f = step * np.arange(count, dtype=np.float64)
    return pd.DataFrame({"f": f, "H": _csf(f)})


def csf_peak(max_f: float = 60.0, step: float = 0.01) -> float:
    """Frequency of maximal sensitivity found by dense grid search"""
    table = csf_curve(max_f, step)
    return float(table["f"].iloc[int(table["H"].values.argmax())])


# ---------------------------------------------------------------------------
# Distance to boundary
# ---------------------------------------------------------------------------

@dataclass
class DistanceField:
    """Per-pixel distance d (pixels) to the nearest differing label, minus one"""

    d: np.ndarray
    connectivity: int = 4


def _lower_envelope(f: np.ndarray) -> np.ndarray:
    """1-D squared distance transform by the lower envelope of parabolas"""
    n = f.size
    out = np.full(n, np.inf)
    sites = np.flatnonzero(np.isfinite(f))
    if sites.size == 0:
        return out
    v: List[int] = [int(sites[0])]
    z: List[float] = [-np.inf, np.inf]
    for q in sites[1:]:
        q = int(q)
        fq = f[q] + q * q
        while True:
            p = v[-1]
            s = (fq - (f[p] + p * p)) / (2.0 * (q - p))
            if s <= z[-2]:
                v.pop()
                z.pop()
            else:
                break
        z[-1] = s
        v.append(q)
        z.append(np.inf)
    k = 0
    for x in range(n):
        while z[k + 1] < x:
            k += 1
        out[x] = (x - v[k]) ** 2 + f[v[k]]
    return out


def _squared_edt(targets: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance to the True pixels of a mask"""
    grid = np.where(targets, 0.0, np.inf)
    h, w = grid.shape
    columns = np.empty_like(grid)
    for x in range(w):
        columns[:, x] = _lower_envelope(grid[:, x])
    out = np.empty_like(grid)
    for y in range(h):
        out[y, :] = _lower_envelope(columns[y, :])
    return out


def _differs_from_neighbor(labels: np.ndarray, connectivity: int) -> np.ndarray:
    """True where some in-image neighbour carries a different label"""
    h, w = labels.shape
    padded = np.pad(labels, 1, mode="edge")
    offsets = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    if connectivity == 8:
        offsets += [(-1, -1), (-1, 1), (1, -1), (1, 1)]
    differs = np.zeros((h, w), dtype=bool)
    for dy, dx in offsets:
        neighbor = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        differs |= neighbor != labels
    return differs


def distance_field(labels: np.ndarray, connectivity: int = 4) -> DistanceField:
    """Exact Euclidean distance to the nearest pixel of another label, minus one, clamped at 0

    The image border is not a boundary; a single-label map is infinitely far
    from any boundary.
    """
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.size == 0:
        raise UsageError(f"distance_field needs a non-empty 2-d label map, got shape {labels.shape}")
    if connectivity not in (4, 8):
        raise ParameterError(f"connectivity must be 4 or 8, got {connectivity}")
    categories = np.unique(labels)
    if categories.size == 1:
        return DistanceField(np.full(labels.shape, np.inf), connectivity)

    d = np.empty(labels.shape, dtype=np.float64)
    for category in categories:
        inside = labels == category
        squared = _squared_edt(~inside)
        d[inside] = np.sqrt(squared[inside])
    d = np.maximum(d - 1.0, 0.0)
    if connectivity == 8:
        d[_differs_from_neighbor(labels, 8)] = 0.0
    return DistanceField(d, connectivity)


# ---------------------------------------------------------------------------
# Boundary-Aware Labels
# ---------------------------------------------------------------------------

def sigma_of_distance(d, cfg: BalConfig) -> np.ndarray:
    """sigma_d = clamp(beta * exp(-d^alpha), sigma_min, sigma_max)"""
    d = np.asarray(d, dtype=np.float64)
    raw = cfg.beta * np.exp(-np.power(d, cfg.alpha))
    return np.clip(raw, cfg.sigma_min, cfg.sigma_max)


@dataclass
class BalTarget:
    """Per-pixel label vectors, stored on the active channels only

    ``values[i]`` holds label channel ``channels[i]``; every other channel of
    the K-long vector is zero at every pixel.
    """

    channels: np.ndarray
    values: np.ndarray
    sigma: np.ndarray
    K: int

    @property
    def shape(self):
        return self.values.shape[1:]

    def dense(self) -> np.ndarray:
        out = np.zeros((self.K,) + tuple(self.shape), dtype=self.values.dtype)
        out[self.channels] = self.values
        return out


def _category_window(category: int, cfg: BalConfig) -> np.ndarray:
    """Offsets of the channels that carry a category's support"""
    offsets = np.arange(-cfg.support_radius, cfg.support_radius + 1)
    channels = cfg.delta_mu * category + offsets
    return offsets[(channels >= 0) & (channels < cfg.K)]


def _check_categories(labels: np.ndarray, cfg: BalConfig) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.size == 0:
        raise UsageError(f"expected a non-empty 2-d label map, got shape {labels.shape}")
    if labels.min() < 0:
        raise CategoryOverflowError(f"negative category id {int(labels.min())}")
    if labels.max() >= cfg.C:
        raise CategoryOverflowError(f"category id {int(labels.max())} exceeds the maximum C - 1 = {cfg.C - 1}")
    return labels.astype(np.int64)


def bal_encode(labels: np.ndarray, field: DistanceField, cfg: BalConfig) -> BalTarget:
    """Encode a label map as boundary-aware Gaussian label vectors"""
    cfg.validate()
    labels = _check_categories(labels, cfg)
    if field.d.shape != labels.shape:
        raise UsageError(f"distance field {field.d.shape} does not match labels {labels.shape}")
    sigma = sigma_of_distance(field.d, cfg)

    blocks = []
    channel_lists = []
    for category in np.unique(labels):
        inside = labels == category
        offsets = _category_window(int(category), cfg)
        s = sigma[inside]
        raw = np.exp(-(offsets[:, None].astype(np.float64) ** 2) / (2.0 * s[None, :] ** 2))
        block = np.zeros((offsets.size,) + labels.shape)
        block[:, inside] = raw / raw.sum(axis=0, keepdims=True)
        blocks.append(block)
        channel_lists.append(cfg.delta_mu * int(category) + offsets)
    return BalTarget(np.concatenate(channel_lists), np.concatenate(blocks), sigma, cfg.K)


def one_hot_encode(labels: np.ndarray, cfg: BalConfig) -> BalTarget:
    """Plain one-hot labels on the BAL channel layout (the non-BAL ablation)"""
    labels = _check_categories(labels, cfg)
    categories = np.unique(labels)
    values = np.stack([(labels == c).astype(np.float64) for c in categories])
    return BalTarget(cfg.delta_mu * categories, values, np.zeros(labels.shape), cfg.K)


def bal_entropy_map(t: BalTarget, eps_log: float = 1e-12) -> np.ndarray:
    """Per-pixel entropy (nats) of the label vectors, the irreducible CE floor"""
    y = t.values
    return -(y * np.log(np.maximum(y, eps_log))).sum(axis=0)


def gaussian_label(sigma: float, cfg: BalConfig) -> np.ndarray:
    """Normalized label vector of an interior category on its 2R+1 support"""
    offsets = np.arange(-cfg.support_radius, cfg.support_radius + 1, dtype=np.float64)
    raw = np.exp(-offsets ** 2 / (2.0 * sigma ** 2))
    return raw / raw.sum()


def _discretized(mean: float, sigma: float, length: int, radius: int) -> np.ndarray:
    k = np.arange(length, dtype=np.float64)
    raw = np.where(np.abs(k - mean) <= radius, np.exp(-(k - mean) ** 2 / (2.0 * sigma ** 2)), 0.0)
    return raw / raw.sum()


def cross_entropy(p: np.ndarray, q: np.ndarray, eps_log: float = 1e-12) -> float:
    return float(-(p * np.log(np.maximum(q, eps_log))).sum())


def bal_distance_analysis(cfg: BalConfig, mu_gaps: Iterable[float], sigma_gaps: Iterable[float],
                          sigma_base: Optional[float] = None, mu_base: float = 20.0) -> pd.DataFrame:
    """Cross-entropy between discretized Gaussians for each (mean gap, sigma gap) pair

    The reference vector sits at ``mu_base`` with width ``sigma_base`` (the
    variance floor by default); the compared vector is shifted by the mean gap
    and widened by the sigma gap.
    """
    mu_gaps = [float(g) for g in mu_gaps]
    sigma_gaps = [float(g) for g in sigma_gaps]
    if any(g < 0 for g in mu_gaps + sigma_gaps):
        raise ParameterError("gaps must be non-negative")
    sigma_p = cfg.sigma_min if sigma_base is None else sigma_base
    radius = cfg.support_radius
    length = int(math.ceil(mu_base + max(mu_gaps, default=0.0))) + radius + 1
    p = _discretized(mu_base, sigma_p, length, radius)

    rows = []
    for mu_gap in mu_gaps:
        for sigma_gap in sigma_gaps:
            sigma_q = sigma_p + sigma_gap
            q = _discretized(mu_base + mu_gap, sigma_q, length, radius)
            rows.append({
                "delta_mu": mu_gap,
                "delta_sigma": sigma_gap,
                "sigma_p": sigma_p,
                "sigma_q": sigma_q,
                "ce": cross_entropy(p, q, cfg.eps_log),
            })
    return pd.DataFrame(rows)


def linearity_fit(table: pd.DataFrame, x: str = "delta_sigma", y: str = "ce") -> Dict[str, float]:
    """Least-squares line through a CE sweep and its coefficient of determination"""
    if len(table) < 2:
        raise ParameterError("need at least 2 points for a linear fit")
    X = table[x].values.reshape(-1, 1)
    target = table[y].values
    model = LinearRegression()
    model.fit(X, target)
    return {
        "slope": float(model.coef_[0]),
        "intercept": float(model.intercept_),
        "r2": float(r2_score(target, model.predict(X))),
    }
