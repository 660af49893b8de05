"""
Soft superpixel machinery.

A regular grid of S x S cells seeds the superpixels. The network predicts, for
every pixel, a distribution Q over the 3x3 block of cells around the cell that
owns it. Channel k of Q refers to the cell at offset (dy, dx) with
k = (dy + 1) * 3 + (dx + 1); channel 4 is the owner. Cells that fall outside
the grid get no mass: Q is renormalized over the valid neighbours before any
aggregation, reconstruction or decoding.
"""
import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from errors import ParameterError, UsageError
from tensor import Tensor, custom_op

logger = logging.getLogger(__name__)

NEIGHBOR_OFFSETS: List[Tuple[int, int]] = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
OWNER_CHANNEL = 4
DENOMINATOR_FLOOR = 1e-8
DEFAULT_INTERVAL = 16


@dataclass(frozen=True)
class GridSpec:
    """Regular tiling of an H x W image into S x S cells (border cells may be smaller)"""

    H: int
    W: int
    S: int

    @property
    def rows(self) -> int:
        return -(-self.H // self.S)

    @property
    def cols(self) -> int:
        return -(-self.W // self.S)

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    def cell_id(self, row: int, col: int) -> int:
        return row * self.cols + col

    def cell_rowcol(self, cell: int) -> Tuple[int, int]:
        return divmod(cell, self.cols)

    def owner_map(self) -> np.ndarray:
        """Cell id owning each pixel"""
        rows = np.arange(self.H) // self.S
        cols = np.arange(self.W) // self.S
        return rows[:, None] * self.cols + cols[None, :]

    def neighbor_ids(self) -> np.ndarray:
        """9 x H x W cell ids of each pixel's neighbourhood, -1 outside the grid"""
        rows = (np.arange(self.H) // self.S)[:, None]
        cols = (np.arange(self.W) // self.S)[None, :]
        out = np.empty((9, self.H, self.W), dtype=np.int64)
        for k, (dy, dx) in enumerate(NEIGHBOR_OFFSETS):
            r = rows + dy
            c = cols + dx
            valid = (r >= 0) & (r < self.rows) & (c >= 0) & (c < self.cols)
            out[k] = np.where(valid, r * self.cols + c, -1)
        return out

    def neighbor_mask(self) -> np.ndarray:
        return (self.neighbor_ids() >= 0).astype(np.float64)


def init_grid(H: int, W: int, S: int = DEFAULT_INTERVAL) -> GridSpec:
    if H < 1 or W < 1 or S < 1:
        raise ParameterError(f"grid needs H, W, S >= 1, got H={H}, W={W}, S={S}")
    if S > min(H, W):
        raise ParameterError(f"sampling interval {S} exceeds the image extent {H}x{W}")
    return GridSpec(H, W, S)


# ---------------------------------------------------------------------------
# Cell-level helpers (numpy, batch-first)
# ---------------------------------------------------------------------------

def _pool(x: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Sum a N x C x H x W array over each cell -> N x C x rows x cols"""
    n, c = x.shape[:2]
    padded = np.zeros((n, c, grid.rows * grid.S, grid.cols * grid.S), dtype=x.dtype)
    padded[:, :, :grid.H, :grid.W] = x
    return padded.reshape(n, c, grid.rows, grid.S, grid.cols, grid.S).sum(axis=(3, 5))


def _expand(x: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Broadcast per-cell values back to pixels -> N x C x H x W"""
    out = np.repeat(np.repeat(x, grid.S, axis=2), grid.S, axis=3)
    return out[:, :, :grid.H, :grid.W]


def _shift(x: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """out[..., r, c] = x[..., r - dy, c - dx], zero outside"""
    out = np.zeros_like(x)
    rows, cols = x.shape[-2:]
    src_r = slice(max(0, -dy), rows - max(0, dy))
    dst_r = slice(max(0, dy), rows - max(0, -dy))
    src_c = slice(max(0, -dx), cols - max(0, dx))
    dst_c = slice(max(0, dx), cols - max(0, -dx))
    out[..., dst_r, dst_c] = x[..., src_r, src_c]
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _check_assoc(Q: Tensor, grid: GridSpec) -> None:
    if Q.ndim != 4 or Q.shape[1] != 9:
        raise UsageError(f"association map must be N x 9 x H x W, got {Q.shape}")
    if Q.shape[2:] != (grid.H, grid.W):
        raise UsageError(f"association map extents {Q.shape[2:]} do not match grid {grid.H}x{grid.W}")


# ---------------------------------------------------------------------------
# Differentiable operations
# ---------------------------------------------------------------------------

def renormalize(Q: Tensor, grid: GridSpec) -> Tensor:
    """Zero the out-of-grid channels and rescale each pixel's distribution to sum to 1"""
    Q = _as_tensor(Q)
    _check_assoc(Q, grid)
    mask = grid.neighbor_mask().astype(Q.dtype)[None]
    masked = Q.data * mask
    total = np.maximum(masked.sum(axis=1, keepdims=True), DENOMINATOR_FLOOR)
    out = masked / total

    def backward_fn(g):
        return (mask * (g - (g * out).sum(axis=1, keepdims=True)) / total,)

    return custom_op(out, (Q,), backward_fn)


def aggregate(Q: Tensor, feats, grid: GridSpec, normalized: bool = False) -> Tensor:
    """Soft superpixel centers: Q-weighted mean of the features of every pixel that sees the cell

    Returns N x C x rows x cols. Pass ``normalized=True`` when Q has already
    been through ``renormalize``.
    """
    Q = _as_tensor(Q)
    feats = _as_tensor(feats)
    if not normalized:
        Q = renormalize(Q, grid)
    _check_assoc(Q, grid)
    if feats.ndim != 4 or feats.shape[0] != Q.shape[0] or feats.shape[2:] != Q.shape[2:]:
        raise UsageError(f"features {feats.shape} do not match association map {Q.shape}")

    q, f = Q.data, feats.data
    num = np.zeros((f.shape[0], f.shape[1], grid.rows, grid.cols), dtype=f.dtype)
    den = np.zeros((f.shape[0], 1, grid.rows, grid.cols), dtype=f.dtype)
    for k, (dy, dx) in enumerate(NEIGHBOR_OFFSETS):
        qk = q[:, k:k + 1]
        num += _shift(_pool(qk * f, grid), dy, dx)
        den += _shift(_pool(qk, grid), dy, dx)
    floored = np.maximum(den, DENOMINATOR_FLOOR)
    centers = num / floored

    def backward_fn(g):
        g_num = g / floored
        g_den = np.where(den > DENOMINATOR_FLOOR, -(g * centers).sum(axis=1, keepdims=True) / floored, 0.0)
        g_q = np.zeros_like(q)
        g_f = np.zeros_like(f)
        for k, (dy, dx) in enumerate(NEIGHBOR_OFFSETS):
            a = _expand(_shift(g_num, -dy, -dx), grid)
            b = _expand(_shift(g_den, -dy, -dx), grid)
            g_q[:, k] = (a * f).sum(axis=1) + b[:, 0]
            g_f += q[:, k:k + 1] * a
        return g_q, g_f

    return custom_op(centers, (Q, feats), backward_fn)


def reconstruct(Q: Tensor, centers, grid: GridSpec, normalized: bool = False) -> Tensor:
    """Per-pixel convex combination of the 9 neighbouring centers -> N x C x H x W"""
    Q = _as_tensor(Q)
    centers = _as_tensor(centers)
    if not normalized:
        Q = renormalize(Q, grid)
    _check_assoc(Q, grid)
    if centers.ndim != 4 or centers.shape[2:] != (grid.rows, grid.cols) or centers.shape[0] != Q.shape[0]:
        raise UsageError(f"centers {centers.shape} do not match the {grid.rows}x{grid.cols} grid")

    q, c = Q.data, centers.data
    gathered = [_expand(_shift(c, -dy, -dx), grid) for dy, dx in NEIGHBOR_OFFSETS]
    out = np.zeros((c.shape[0], c.shape[1], grid.H, grid.W), dtype=np.result_type(q, c))
    for k, ck in enumerate(gathered):
        out += q[:, k:k + 1] * ck

    def backward_fn(g):
        g_q = np.stack([(g * ck).sum(axis=1) for ck in gathered], axis=1)
        g_c = np.zeros_like(c)
        for k, (dy, dx) in enumerate(NEIGHBOR_OFFSETS):
            g_c += _shift(_pool(q[:, k:k + 1] * g, grid), dy, dx)
        return g_q, g_c

    return custom_op(out, (Q, centers), backward_fn)


# ---------------------------------------------------------------------------
# Hard decoding
# ---------------------------------------------------------------------------

@dataclass
class SuperpixelMap:
    """Per-pixel superpixel ids, dense in [0, count)"""

    labels: np.ndarray
    count: int

    @property
    def shape(self) -> Tuple[int, int]:
        return self.labels.shape

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "SuperpixelMap":
        """Densify arbitrary ids, preserving their sorted order"""
        labels = np.asarray(labels)
        if labels.ndim != 2 or labels.size == 0:
            raise UsageError(f"superpixel map must be a non-empty 2-d array, got {labels.shape}")
        unique, dense = np.unique(labels, return_inverse=True)
        return cls(dense.reshape(labels.shape).astype(np.int64), int(unique.size))

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.count)


def grid_tiling(grid: GridSpec) -> SuperpixelMap:
    return SuperpixelMap(grid.owner_map().astype(np.int64), grid.n_cells)


def decode_hard(Q, grid: GridSpec, min_size: Optional[int] = None) -> SuperpixelMap:
    """Argmax decode of a single association map, then connectivity enforcement

    Ties go to the owner cell, then to the lowest cell id.
    """
    q = Q.numpy() if isinstance(Q, Tensor) else np.asarray(Q)
    if q.ndim == 3:
        q = q[None]
    if q.shape[0] != 1:
        raise UsageError(f"decode_hard takes one image at a time, got batch {q.shape[0]}")
    q = renormalize(Tensor(q.astype(np.float64)), grid).numpy()[0]

    ids = grid.neighbor_ids()
    scores = np.where(ids >= 0, q, -np.inf)
    best = scores.max(axis=0)
    candidates = scores == best[None]
    sentinel = np.iinfo(np.int64).max
    lowest = np.where(candidates, ids, sentinel).min(axis=0)
    labels = np.where(candidates[OWNER_CHANNEL], ids[OWNER_CHANNEL], lowest)

    if min_size is None:
        min_size = grid.S * grid.S // 16
    return enforce_connectivity(SuperpixelMap(labels, grid.n_cells), min_size)


def connected_components(labels: np.ndarray) -> Tuple[np.ndarray, int]:
    """4-connected components of equal-label pixels, numbered in raster order of their anchors"""
    labels = np.asarray(labels)
    _, dense = np.unique(labels, return_inverse=True)
    dense = dense.reshape(labels.shape) + 1
    components = np.zeros(labels.shape, dtype=np.int64)
    offset = 0
    for value, box in enumerate(ndimage.find_objects(dense), start=1):
        mask = dense[box] == value
        parts, n = ndimage.label(mask)
        components[box][mask] = parts[mask] + (offset - 1)
        offset += n
    # ids are grouped by label; re-rank by first raster occurrence so ids follow anchors
    _, first, inverse = np.unique(components, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    return order[inverse].reshape(labels.shape), int(first.size)


def _adjacency(components: np.ndarray, n: int) -> Dict[int, Dict[int, int]]:
    """Shared 4-neighbour edge counts between distinct components"""
    pairs = [
        (components[:, :-1].ravel(), components[:, 1:].ravel()),
        (components[:-1, :].ravel(), components[1:, :].ravel()),
    ]
    a = np.concatenate([p[0] for p in pairs])
    b = np.concatenate([p[1] for p in pairs])
    differ = a != b
    a, b = a[differ], b[differ]
    keys = np.concatenate([a * n + b, b * n + a])
    unique, counts = np.unique(keys, return_counts=True)
    adjacency: Dict[int, Dict[int, int]] = defaultdict(dict)
    for key, count in zip(unique, counts):
        adjacency[int(key // n)][int(key % n)] = int(count)
    return adjacency


def enforce_connectivity(m: Union[SuperpixelMap, np.ndarray], min_size: Optional[int] = None) -> SuperpixelMap:
    """Make every superpixel a single 4-connected region and re-densify ids

    Each label keeps its largest component (ties: smaller raster anchor) if it
    has at least ``min_size`` pixels. Every other component is absorbed into
    the adjacent label it shares the most edges with (ties: smaller label).
    """
    labels = m.labels if isinstance(m, SuperpixelMap) else np.asarray(m)
    if labels.ndim != 2 or labels.size == 0:
        raise UsageError(f"superpixel map must be a non-empty 2-d array, got {labels.shape}")
    if min_size is None:
        min_size = DEFAULT_INTERVAL * DEFAULT_INTERVAL // 16
    labels = labels.astype(np.int64)

    components, n = connected_components(labels)
    flat = components.ravel()
    sizes = np.bincount(flat, minlength=n)
    anchors = np.full(n, labels.size, dtype=np.int64)
    np.minimum.at(anchors, flat, np.arange(labels.size))
    owner_label = np.empty(n, dtype=np.int64)
    owner_label[flat] = labels.ravel()

    # components are numbered by anchor, so a stable sort on -size breaks ties toward smaller anchors
    order = np.argsort(-sizes, kind="stable")
    assigned = np.full(n, -1, dtype=np.int64)
    claimed = set()
    for comp in order:
        label = int(owner_label[comp])
        if label in claimed:
            continue
        claimed.add(label)
        if sizes[comp] >= min_size:
            assigned[comp] = label
    if not (assigned >= 0).any():
        assigned[order[0]] = owner_label[order[0]]

    adjacency = _adjacency(components, n)
    pending = np.flatnonzero(assigned < 0)
    rounds = 0
    while pending.size:
        rounds += 1
        snapshot = assigned.copy()
        for comp in pending:
            votes: Dict[int, int] = defaultdict(int)
            for neighbor, edges in adjacency.get(int(comp), {}).items():
                if snapshot[neighbor] >= 0:
                    votes[int(snapshot[neighbor])] += edges
            if votes:
                assigned[comp] = min(votes, key=lambda label: (-votes[label], label))
        pending = np.flatnonzero(assigned < 0)
    if rounds:
        logger.debug(f"connectivity enforcement absorbed fragments in {rounds} rounds")

    return SuperpixelMap.from_labels(assigned[components])


def is_connected(m: SuperpixelMap) -> bool:
    """True when every id forms exactly one 4-connected region"""
    components, n = connected_components(m.labels)
    return n == np.unique(m.labels).size
