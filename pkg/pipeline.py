"""
Inference glue shared by the CLI, the evaluation sweep and the tests.
"""
import logging
import math
from typing import Callable, Optional, Tuple

import numpy as np
from skimage.transform import resize

from config import SlicConfig
from data_io import image_features
from errors import ParameterError
from esm_net import ESMNet
from slic import slic
from spix_core import DEFAULT_INTERVAL, SuperpixelMap, decode_hard, enforce_connectivity, grid_tiling, init_grid
from tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

Segmenter = Callable[[np.ndarray, int], SuperpixelMap]


def interval_for_count(H: int, W: int, count: int) -> int:
    """Sampling interval giving about ``count`` superpixels on an H x W image"""
    if count < 1:
        raise ParameterError(f"superpixel count must be >= 1, got {count}")
    return max(1, int(round(math.sqrt(H * W / count))))


def _working_extent(H: int, W: int, S: int) -> Tuple[int, int]:
    """Extent the image is resampled to so the network's interval maps onto S"""
    scale = DEFAULT_INTERVAL / S
    h = max(16, int(math.ceil(H * scale / 16)) * 16)
    w = max(16, int(math.ceil(W * scale / 16)) * 16)
    return h, w


def predict_association(net: ESMNet, image: np.ndarray) -> np.ndarray:
    """9 x H x W association map for one image whose extents are multiples of 16"""
    features = image_features(image, net.cfg.in_channels)[None]
    net.eval()
    with no_grad():
        Q = net(Tensor(features))
    return Q.numpy()[0]


def infer_superpixels(net: ESMNet, image: np.ndarray, S: int = DEFAULT_INTERVAL,
                      min_size: Optional[int] = None) -> SuperpixelMap:
    """Decode superpixels of about S x S pixels with a network trained at the default interval"""
    if S < 1:
        raise ParameterError(f"sampling interval must be >= 1, got {S}")
    H, W = image.shape[:2]
    if min_size is None:
        min_size = max(1, S * S // 16)
    h, w = _working_extent(H, W, S)
    if (h, w) == (H, W):
        return decode_hard(predict_association(net, image), init_grid(H, W, DEFAULT_INTERVAL), min_size)

    logger.debug(f"resampling {H}x{W} to {h}x{w} for interval {S}")
    working = resize(image, (h, w), order=1, mode="edge", anti_aliasing=(h < H or w < W))
    small = decode_hard(predict_association(net, working), init_grid(h, w, DEFAULT_INTERVAL), 1)
    rows = np.arange(H) * h // H
    cols = np.arange(W) * w // W
    return enforce_connectivity(small.labels[rows[:, None], cols[None, :]], min_size)


def network_segmenter(net: ESMNet) -> Segmenter:
    return lambda image, S: infer_superpixels(net, image, S)


def slic_segmenter(cfg: SlicConfig) -> Segmenter:
    def segment(image: np.ndarray, S: int) -> SuperpixelMap:
        H, W = image.shape[:2]
        count = max(1, int(round(H * W / (S * S))))
        return slic(image, SlicConfig(count, cfg.compactness, cfg.iterations)).superpixels
    return segment


def grid_segmenter(image: np.ndarray, S: int) -> SuperpixelMap:
    """Plain regular tiling, the trivial reference"""
    H, W = image.shape[:2]
    return grid_tiling(init_grid(H, W, S))
