"""
Training objective and desk-scale training loop.

The loss reconstructs each pixel's label vector and position from the soft
superpixel centers implied by Q, then scores the labels with cross-entropy
and the positions with an L2 distance:

    total = mean_p CE(l'(p), l(p)) + (m / S) * sum_p ||p - p'(p)||_2
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import LossConfig, RunConfig
from data_io import SceneDataset, image_features, pixel_grid
from errors import DimensionError, NumericError, ParameterError
from esm_net import ESMNet
from spix_core import GridSpec, aggregate, init_grid, reconstruct, renormalize
from tensor import Adam, Tensor, add, backward, l2_norm, log_clamped, mean, mul, neg, sub, tsum
from vision_front import BalTarget, bal_encode, one_hot_encode

logger = logging.getLogger(__name__)

LOSS_LOG_NAME = "loss_log.csv"
LOSS_COLUMNS = ["iteration", "lr", "total", "ce_part", "pos_part"]


@dataclass
class LossResult:
    total: Tensor
    ce: Tensor
    pos: Tensor

    @property
    def ce_part(self) -> float:
        return self.ce.item()

    @property
    def pos_part(self) -> float:
        return self.pos.item()


def stack_targets(targets: Sequence[BalTarget], dtype=np.float32) -> Tuple[np.ndarray, np.ndarray]:
    """Batch the label vectors on the union of their active channels -> (N x U x H x W, channels)"""
    channels = np.unique(np.concatenate([t.channels for t in targets]))
    shape = targets[0].shape
    out = np.zeros((len(targets), channels.size) + tuple(shape), dtype=dtype)
    for i, t in enumerate(targets):
        if t.shape != shape:
            raise DimensionError(f"target {i} has extent {t.shape}, expected {shape}")
        out[i, np.searchsorted(channels, t.channels)] = t.values
    return out, channels


def _first_bad_block(values: np.ndarray, S: int) -> str:
    n, y, x = np.argwhere(~np.isfinite(values))[0]
    return f"image {n}, pixel block (row {y // S}, col {x // S})"


def superpixel_loss(Q: Tensor, targets: Sequence[BalTarget], pos, grid: GridSpec, cfg: LossConfig) -> LossResult:
    """Label cross-entropy plus weighted position reconstruction error

    ``pos`` holds N x 2 x H x W pixel coordinates (normalized to [0, 1] by the
    training loop).
    """
    if Q.ndim != 4 or Q.shape[0] != len(targets):
        raise DimensionError(f"association map {Q.shape} does not match {len(targets)} targets")
    labels, _ = stack_targets(targets, Q.dtype)
    labels = Tensor(labels)
    coords = pos if isinstance(pos, Tensor) else Tensor(np.asarray(pos, dtype=Q.dtype))
    if coords.shape != (Q.shape[0], 2) + Q.shape[2:]:
        raise DimensionError(f"coordinates {coords.shape} do not match association map {Q.shape}")

    Qv = renormalize(Q, grid)
    label_centers = aggregate(Qv, labels, grid, normalized=True)
    rebuilt = reconstruct(Qv, label_centers, grid, normalized=True)
    ce_map = neg(tsum(mul(labels, log_clamped(rebuilt, cfg.eps_log)), axis=1))

    pos_centers = aggregate(Qv, coords, grid, normalized=True)
    rebuilt_pos = reconstruct(Qv, pos_centers, grid, normalized=True)
    distance = l2_norm(sub(coords, rebuilt_pos), axis=1)

    ce = mean(ce_map)
    position = mul(tsum(distance), cfg.m / (cfg.S * Q.shape[0]))
    total = add(ce, position)
    if not np.isfinite(total.item()):
        bad = ce_map.data if not np.all(np.isfinite(ce_map.data)) else distance.data
        raise NumericError(f"non-finite loss at {_first_bad_block(bad, grid.S)}")
    return LossResult(total, ce, position)


def make_targets(labels: np.ndarray, distance, run: RunConfig) -> BalTarget:
    if run.train.label_mode == "onehot":
        return one_hot_encode(labels, run.bal)
    return bal_encode(labels, distance, run.bal)


@dataclass
class TrainResult:
    log: pd.DataFrame
    checkpoints: List[Path] = field(default_factory=list)


class Trainer:
    """Seeded minibatch training of an ESMNet on a SceneDataset"""

    def __init__(self, dataset: SceneDataset, net: ESMNet, run: RunConfig, out_dir: Optional[str] = None):
        if len(dataset) == 0:
            raise ParameterError("training needs a non-empty dataset")
        self.dataset = dataset
        self.net = net
        self.run = run.validate()
        self.out_dir = Path(out_dir) if out_dir else None
        self.crop = self._resolve_crop()
        self.grid = init_grid(self.crop, self.crop, run.loss.S)
        self.optimizer = Adam(net.parameters(), lr=run.loss.lr, betas=run.loss.betas, eps=run.loss.adam_eps)
        self.coords = pixel_grid((self.crop, self.crop)).astype(np.float32)
        self._order: List[int] = []
        self._rng = np.random.default_rng(run.seed)
        self._position = 0

    def _resolve_crop(self) -> int:
        smallest = min(min(labels.shape) for _, labels in self.dataset.pairs)
        crop = self.run.loss.crop
        if crop > smallest:
            crop = (smallest // 16) * 16
            if crop < 16:
                raise ParameterError(f"images of extent {smallest} are too small for a 16-pixel crop")
            logger.info(f"Crop {self.run.loss.crop} exceeds the smallest image; using {crop}")
        return crop

    def _next_index(self) -> int:
        if not self._order:
            self._order = list(self._rng.permutation(len(self.dataset)))
        return int(self._order.pop(0))

    def _assemble(self, item: Tuple[int, int]):
        index, stream_position = item
        run = self.run
        sample = self.dataset.sample(index, self.crop, run.seed ^ stream_position, run.train.flip_prob,
                                     run.bal.connectivity)
        features = image_features(sample.image, run.net.in_channels)
        return features, make_targets(sample.labels, sample.distance, run)

    def _batch(self, pool: Optional[ThreadPoolExecutor]):
        items = []
        for _ in range(self.run.loss.batch):
            items.append((self._next_index(), self._position))
            self._position += 1
        assembled = list(pool.map(self._assemble, items)) if pool else [self._assemble(i) for i in items]
        features = np.stack([f for f, _ in assembled])
        targets = [t for _, t in assembled]
        return Tensor(features), targets

    def step(self, iteration: int, pool: Optional[ThreadPoolExecutor] = None) -> LossResult:
        lr = self.run.loss.lr_at(iteration)
        self.optimizer.lr = lr
        x, targets = self._batch(pool)
        coords = np.broadcast_to(self.coords, (x.shape[0],) + self.coords.shape).copy()
        self.optimizer.zero_grad()
        Q = self.net(x)
        try:
            result = superpixel_loss(Q, targets, coords, self.grid, self.run.loss)
            backward(result.total)
            self.optimizer.step()
        except NumericError as e:
            raise NumericError(f"iteration {iteration}: {e}")
        return result

    def fit(self) -> TrainResult:
        cfg = self.run.train
        self.net.train()
        rows = []
        checkpoints: List[Path] = []
        pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
        try:
            for iteration in range(cfg.iterations):
                result = self.step(iteration, pool)
                row = {"iteration": iteration, "lr": self.optimizer.lr, "total": result.total.item(),
                       "ce_part": result.ce_part, "pos_part": result.pos_part}
                rows.append(row)
                if cfg.log_every and iteration % cfg.log_every == 0:
                    logger.info(
                        f"iter {iteration} lr={row['lr']:.2e} total={row['total']:.5f} "
                        f"ce={row['ce_part']:.5f} pos={row['pos_part']:.5f}"
                    )
                if self.out_dir and cfg.checkpoint_every and (iteration + 1) % cfg.checkpoint_every == 0:
                    checkpoints.append(self.net.save_checkpoint(self.out_dir / f"checkpoint_{iteration + 1:06d}.bspx"))
        finally:
            if pool:
                pool.shutdown()

        log = pd.DataFrame(rows, columns=LOSS_COLUMNS)
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            log.to_csv(self.out_dir / LOSS_LOG_NAME, index=False)
            checkpoints.append(self.net.save_checkpoint(self.out_dir / "checkpoint_final.bspx"))
        return TrainResult(log, checkpoints)


def train(dataset: SceneDataset, net: ESMNet, run: RunConfig, out_dir: Optional[str] = None) -> TrainResult:
    """Train ``net`` in place; writes the loss CSV and checkpoints when ``out_dir`` is given"""
    return Trainer(dataset, net, run, out_dir).fit()
