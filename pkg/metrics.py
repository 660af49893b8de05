"""
Superpixel benchmark metrics.

Achievable Segmentation Accuracy (ASA), Boundary Recall/Precision (BR/BP)
within a Chebyshev pixel tolerance, and size-weighted isoperimetric
Compactness (CO), plus helpers to evaluate image sets and granularity sweeps.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import ndimage

from errors import ParameterError, UsageError
from spix_core import SuperpixelMap

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 2

LabelsLike = Union[SuperpixelMap, np.ndarray]


@dataclass
class MetricsReport:
    asa: float
    br: float
    bp: float
    co: float
    superpixel_count: int
    boundary_tolerance: int

    def to_dict(self) -> Dict:
        return asdict(self)


def _labels(x: LabelsLike) -> np.ndarray:
    labels = x.labels if isinstance(x, SuperpixelMap) else np.asarray(x)
    if labels.ndim != 2 or labels.size == 0:
        raise UsageError(f"expected a non-empty 2-d label map, got shape {labels.shape}")
    return labels


def _pair(sp: LabelsLike, gt: LabelsLike) -> Tuple[np.ndarray, np.ndarray]:
    a, b = _labels(sp), _labels(gt)
    if a.shape != b.shape:
        raise UsageError(f"superpixel map {a.shape} and ground truth {b.shape} differ in extent")
    return a, b


def asa(sp: LabelsLike, gt: LabelsLike) -> float:
    """Fraction of pixels covered when each superpixel takes its majority ground-truth region"""
    a, b = _pair(sp, gt)
    _, s = np.unique(a, return_inverse=True)
    _, g = np.unique(b, return_inverse=True)
    overlap = np.zeros((s.max() + 1, g.max() + 1), dtype=np.int64)
    np.add.at(overlap, (s.ravel(), g.ravel()), 1)
    return float(overlap.max(axis=1).sum() / a.size)


def boundary_map(labels: LabelsLike) -> np.ndarray:
    """Pixels whose right or bottom neighbour carries a different label"""
    labels = _labels(labels)
    out = np.zeros(labels.shape, dtype=bool)
    out[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    out[:-1, :] |= labels[:-1, :] != labels[1:, :]
    return out


def _near(boundary: np.ndarray, tol: int) -> np.ndarray:
    if tol == 0:
        return boundary
    return ndimage.binary_dilation(boundary, structure=np.ones((2 * tol + 1, 2 * tol + 1), dtype=bool))


def boundary_recall_precision(sp: LabelsLike, gt: LabelsLike, tol: int = DEFAULT_TOLERANCE) -> Tuple[float, float]:
    """(BR, BP); an empty reference boundary set scores 1.0"""
    if tol < 0:
        raise ParameterError(f"boundary tolerance must be >= 0, got {tol}")
    a, b = _pair(sp, gt)
    sp_edges, gt_edges = boundary_map(a), boundary_map(b)
    n_gt, n_sp = int(gt_edges.sum()), int(sp_edges.sum())
    br = 1.0 if n_gt == 0 else float((gt_edges & _near(sp_edges, tol)).sum() / n_gt)
    bp = 1.0 if n_sp == 0 else float((sp_edges & _near(gt_edges, tol)).sum() / n_sp)
    return br, bp


def compactness(sp: LabelsLike) -> float:
    """Size-weighted isoperimetric quotient 4*pi*A/P^2, each term clipped to 1

    P counts pixel sides that face another label or the image border.
    """
    labels = _labels(sp)
    _, dense = np.unique(labels, return_inverse=True)
    dense = dense.reshape(labels.shape)
    padded = np.pad(dense, 1, constant_values=-1)
    core = padded[1:-1, 1:-1]
    exposed = np.zeros(labels.shape, dtype=np.int64)
    for neighbor in (padded[:-2, 1:-1], padded[2:, 1:-1], padded[1:-1, :-2], padded[1:-1, 2:]):
        exposed += neighbor != core
    area = np.bincount(dense.ravel()).astype(np.float64)
    perimeter = np.bincount(dense.ravel(), weights=exposed.ravel())
    quotient = np.minimum(4.0 * np.pi * area / perimeter ** 2, 1.0)
    return float((area / labels.size * quotient).sum())


def evaluate(sp: LabelsLike, gt: LabelsLike, tol: int = DEFAULT_TOLERANCE) -> MetricsReport:
    a, b = _pair(sp, gt)
    br, bp = boundary_recall_precision(a, b, tol)
    count = sp.count if isinstance(sp, SuperpixelMap) else int(np.unique(a).size)
    return MetricsReport(asa(a, b), br, bp, compactness(a), int(count), tol)


def evaluate_many(pairs: Sequence[Tuple[LabelsLike, LabelsLike]], names: Optional[Sequence[str]] = None,
                  tol: int = DEFAULT_TOLERANCE, workers: int = 1) -> pd.DataFrame:
    """One MetricsReport row per (superpixels, ground truth) pair"""
    names = list(names) if names is not None else [str(i) for i in range(len(pairs))]

    def score(pair):
        return evaluate(pair[0], pair[1], tol)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(score, pairs))
    else:
        reports = [score(pair) for pair in pairs]
    frame = pd.DataFrame([r.to_dict() for r in reports])
    frame.insert(0, "name", names)
    return frame


def sweep(segmenter: Callable[[np.ndarray, int], SuperpixelMap],
          pairs: Sequence[Tuple[np.ndarray, np.ndarray]], intervals: Sequence[int],
          tol: int = DEFAULT_TOLERANCE) -> pd.DataFrame:
    """Metric-vs-granularity rows: one per (interval, image)

    ``segmenter(image, S)`` produces the superpixel map for an interval.
    """
    rows: List[Dict] = []
    for S in intervals:
        for index, (image, gt) in enumerate(pairs):
            report = evaluate(segmenter(image, int(S)), gt, tol)
            rows.append({"S": int(S), "image": index, **report.to_dict()})
        logger.info(f"sweep S={S}: {len(pairs)} images evaluated")
    return pd.DataFrame(rows)


def summarize_sweep(table: pd.DataFrame) -> pd.DataFrame:
    """Mean metrics per interval, ordered by increasing superpixel count"""
    if table.empty:
        return table
    summary = table.groupby("S")[["superpixel_count", "asa", "br", "bp", "co"]].mean().reset_index()
    return summary.sort_values("superpixel_count").reset_index(drop=True)
