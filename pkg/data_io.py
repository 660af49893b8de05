"""
Data ingestion and serialization.

Image/label PNG pairs, CSV manifests, seeded crop-and-flip augmentation,
random layered-shape scenes for desk-scale experiments, the network's input
features, and the superpixel map PNG + JSON sidecar format.
"""
import hashlib
import json
import logging
import math
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from PIL import Image, UnidentifiedImageError
from skimage import color, draw

from config import SyntheticSceneConfig
from errors import (CategoryOverflowError, ExtentMismatchError, ManifestError, ParameterError,
                    UnreadableFileError)
from spix_core import SuperpixelMap
from vision_front import DistanceField, distance_field

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MANIFEST_NAME = "manifest.csv"


# ---------------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------------

def _open_png(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
        return img
    except (OSError, UnidentifiedImageError) as e:
        raise UnreadableFileError(f"cannot read image {path}: {e}")


def load_image(path) -> np.ndarray:
    """8-bit RGB PNG -> H x W x 3 floats in [0, 1]"""
    img = _open_png(path)
    if img.mode != "RGB":
        img = img.convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def load_labels(path, C: Optional[int] = None) -> np.ndarray:
    """Grayscale PNG of category ids -> H x W int64"""
    img = _open_png(path)
    if img.mode not in ("L", "I", "I;16", "I;16B", "I;16L"):
        raise UnreadableFileError(f"label image {path} has mode {img.mode}, expected grayscale ids")
    labels = np.asarray(img).astype(np.int64)
    if C is not None and labels.size and labels.max() >= C:
        raise CategoryOverflowError(f"label image {path} contains id {int(labels.max())} >= C = {C}")
    return labels


def load_pair(image_path, label_path, C: Optional[int] = 50) -> Tuple[np.ndarray, np.ndarray]:
    image = load_image(image_path)
    labels = load_labels(label_path, C)
    if image.shape[:2] != labels.shape:
        raise ExtentMismatchError(
            f"image {image_path} is {image.shape[0]}x{image.shape[1]} but labels {label_path} are "
            f"{labels.shape[0]}x{labels.shape[1]}"
        )
    return image, labels


def save_image(path, image: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels).save(path)
    return path


def save_labels(path, labels: np.ndarray) -> Path:
    """Lossless 16-bit grayscale PNG"""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 65535:
        raise ParameterError("label ids must fit in 16 bits")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(labels.astype(np.uint16)).save(path)
    return path


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def save_superpixels(path, sp: SuperpixelMap, S: int, source_hash: Optional[str] = None) -> Tuple[Path, Path]:
    """Write ids as a 16-bit PNG and the count/interval/source hash as a JSON sidecar"""
    png = save_labels(path, sp.labels)
    sidecar = png.with_suffix(".json")
    with open(sidecar, "w") as f:
        json.dump({"count": int(sp.count), "S": int(S), "source_sha256": source_hash}, f, indent=2, sort_keys=True)
    return png, sidecar


def load_superpixels(path) -> SuperpixelMap:
    labels = load_labels(path)
    sidecar = Path(path).with_suffix(".json")
    if sidecar.exists():
        with open(sidecar) as f:
            meta = json.load(f)
        count = int(meta.get("count", 0))
        if count != np.unique(labels).size:
            logger.warning(f"sidecar count {count} disagrees with {path}; re-densifying ids")
        else:
            return SuperpixelMap(labels, count)
    return SuperpixelMap.from_labels(labels)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

@dataclass
class Manifest:
    """Rows of (first path, label path, split); paths are resolved against ``root``"""

    rows: pd.DataFrame
    root: Path
    first: str = "image"

    @classmethod
    def read(cls, path, first: str = "image", check: bool = True) -> "Manifest":
        path = Path(path)
        try:
            df = pd.read_csv(path, dtype=str)
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise ManifestError(f"cannot read manifest {path}: {e}")

        df.columns = df.columns.str.strip()
        required = [first, "label"]
        if not all(col in df.columns for col in required):
            raise ManifestError(f"manifest {path} must have columns {required}, found {list(df.columns)}")
        if "split" not in df.columns:
            df["split"] = "test"
        df = df.dropna(subset=required)
        df["split"] = df["split"].fillna("test").str.strip()
        unknown = sorted(set(df["split"]) - set(SPLITS))
        if unknown:
            raise ManifestError(f"manifest {path} has unknown splits {unknown}")
        if df.empty:
            raise ManifestError(f"manifest {path} lists no pairs")

        manifest = cls(df[[first, "label", "split"]].reset_index(drop=True), path.parent, first)
        if check:
            missing = [p for p in manifest.paths(first) + manifest.paths("label") if not p.exists()]
            if missing:
                raise ManifestError(f"manifest {path} references missing files, e.g. {missing[0]}")
        return manifest

    def paths(self, column: str, split: Optional[str] = None) -> List[Path]:
        rows = self.rows if split is None else self.rows[self.rows["split"] == split]
        return [p if p.is_absolute() else self.root / p for p in map(Path, rows[column])]

    def pairs(self, split: Optional[str] = None) -> List[Tuple[Path, Path]]:
        return list(zip(self.paths(self.first, split), self.paths("label", split)))

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.rows.to_csv(path, index=False)
        return path

    def __len__(self) -> int:
        return len(self.rows)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def crop_params(shape: Tuple[int, int], crop: int, seed: int, flip_prob: float = 0.5) -> Tuple[int, int, bool]:
    """Seeded (y0, x0, flip) for a square crop"""
    h, w = shape
    if crop < 1 or crop % 16:
        raise ParameterError(f"crop {crop} must be a positive multiple of 16")
    if crop > min(h, w):
        raise ParameterError(f"crop {crop} exceeds the image extent {h}x{w}")
    rng = np.random.default_rng(seed)
    y0 = int(rng.integers(0, h - crop + 1))
    x0 = int(rng.integers(0, w - crop + 1))
    flip = bool(rng.random() < flip_prob)
    return y0, x0, flip


def apply_crop_flip(array: np.ndarray, y0: int, x0: int, crop: int, flip: bool) -> np.ndarray:
    out = array[y0:y0 + crop, x0:x0 + crop]
    if flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def random_crop_flip(pair: Tuple[np.ndarray, np.ndarray], crop: int, seed: int,
                     flip_prob: float = 0.5) -> Tuple[np.ndarray, np.ndarray]:
    """Same seeded crop and horizontal flip applied to image and labels"""
    image, labels = pair
    if image.shape[:2] != labels.shape:
        raise ExtentMismatchError(f"image {image.shape[:2]} and labels {labels.shape} differ in extent")
    y0, x0, flip = crop_params(labels.shape, crop, seed, flip_prob)
    return apply_crop_flip(image, y0, x0, crop, flip), apply_crop_flip(labels, y0, x0, crop, flip)


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

def _draw_shape(kind: str, rng: np.random.Generator, shape: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    h, w = shape
    extent = min(h, w)
    cy, cx = rng.uniform(0.15, 0.85) * h, rng.uniform(0.15, 0.85) * w
    radius = rng.uniform(0.15, 0.35) * extent
    if kind == "ellipse":
        ratio = rng.uniform(0.5, 1.0)
        return draw.ellipse(cy, cx, radius, radius * ratio, shape=shape, rotation=rng.uniform(-math.pi, math.pi))
    vertices = int(rng.integers(3, 7))
    angles = np.sort(rng.uniform(0, 2 * math.pi, vertices))
    radii = radius * rng.uniform(0.6, 1.0, vertices)
    return draw.polygon(cy + radii * np.sin(angles), cx + radii * np.cos(angles), shape=shape)


def gen_synthetic(cfg: SyntheticSceneConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Layered random shapes over a background, with per-region colors and pixel noise

    Every category in the label map covers at least 16 pixels; scenes that
    violate this are redrawn from the same generator stream.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    shape = (cfg.height, cfg.width)
    lo, hi = cfg.region_range
    regions = int(rng.integers(lo, hi + 1))

    for attempt in range(1000):
        labels = np.zeros(shape, dtype=np.int64)
        for category in range(1, regions):
            kind = cfg.shapes[int(rng.integers(0, len(cfg.shapes)))]
            rr, cc = _draw_shape(kind, rng, shape)
            labels[rr, cc] = category
        counts = np.bincount(labels.ravel(), minlength=regions)
        if counts.min() >= 16:
            break
    else:
        raise ParameterError(f"could not draw {regions} regions of >= 16 pixels on {shape[0]}x{shape[1]}")
    if attempt:
        logger.debug(f"synthetic scene seed={cfg.seed} redrawn {attempt} times")

    base = rng.uniform(0.1, 0.9, size=(regions, 3)) + rng.normal(0.0, 1.0, size=(regions, 3)) * cfg.jitter
    noise = rng.normal(0.0, 1.0, size=shape + (3,)) * cfg.noise
    image = np.clip(base[labels] + noise, 0.0, 1.0)
    return image, labels


def write_synthetic_corpus(out_dir, n: int, cfg: SyntheticSceneConfig, test_fraction: float = 0.2) -> Manifest:
    """Write n scenes (seed = base seed XOR index) as PNG pairs plus a manifest"""
    if n < 1:
        raise ParameterError("corpus size must be >= 1")
    out = Path(out_dir)
    n_train = n - int(math.floor(n * test_fraction)) if n > 1 else 1
    rows = []
    for index in range(n):
        image, labels = gen_synthetic(replace(cfg, seed=cfg.seed ^ index))
        name = f"scene_{index:04d}.png"
        save_image(out / "images" / name, image)
        save_labels(out / "labels" / name, labels)
        rows.append({"image": f"images/{name}", "label": f"labels/{name}",
                     "split": "train" if index < n_train else "test"})
    manifest = Manifest(pd.DataFrame(rows), out)
    manifest.write(out / MANIFEST_NAME)
    logger.info(f"Wrote {n} synthetic scenes to {out}")
    return manifest


# ---------------------------------------------------------------------------
# Network input
# ---------------------------------------------------------------------------

def image_features(image: np.ndarray, in_channels: int = 5) -> np.ndarray:
    """C x H x W float32 features: LAB scaled to about unit range, optionally with normalized y, x"""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ParameterError(f"expected an H x W x 3 image, got {image.shape}")
    lab = color.rgb2lab(image)
    channels = [lab[..., 0] / 100.0, lab[..., 1] / 128.0, lab[..., 2] / 128.0]
    if in_channels == 5:
        channels += list(pixel_grid(image.shape[:2]))
    elif in_channels != 3:
        raise ParameterError(f"in_channels must be 3 or 5, got {in_channels}")
    return np.stack(channels).astype(np.float32)


def pixel_grid(shape: Tuple[int, int]) -> np.ndarray:
    """2 x H x W (y, x) coordinates normalized to [0, 1]"""
    h, w = shape
    ys = np.arange(h, dtype=np.float64) / max(h - 1, 1)
    xs = np.arange(w, dtype=np.float64) / max(w - 1, 1)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([yy, xx])


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    image: np.ndarray
    labels: np.ndarray
    distance: DistanceField


class SceneDataset:
    """In-memory (image, labels) pairs with cached full-image distance fields"""

    def __init__(self, pairs: Sequence[Tuple[np.ndarray, np.ndarray]], names: Optional[Sequence[str]] = None):
        if not pairs:
            raise ParameterError("dataset is empty")
        self.pairs = list(pairs)
        self.names = list(names) if names is not None else [f"sample_{i:04d}" for i in range(len(self.pairs))]
        self._fields: Dict[Tuple[int, int], DistanceField] = {}
        self._lock = threading.Lock()

    @classmethod
    def from_manifest(cls, manifest: Manifest, split: Optional[str] = "train", C: int = 50) -> "SceneDataset":
        pairs = manifest.pairs(split)
        if not pairs:
            raise ManifestError(f"manifest has no rows for split {split!r}")
        return cls([load_pair(image, label, C) for image, label in pairs], [p.stem for p, _ in pairs])

    @classmethod
    def synthetic(cls, n: int, cfg: SyntheticSceneConfig) -> "SceneDataset":
        return cls([gen_synthetic(replace(cfg, seed=cfg.seed ^ i)) for i in range(n)])

    def __len__(self) -> int:
        return len(self.pairs)

    def distance(self, index: int, connectivity: int = 4) -> DistanceField:
        key = (index, connectivity)
        with self._lock:
            cached = self._fields.get(key)
        if cached is None:
            cached = distance_field(self.pairs[index][1], connectivity)
            with self._lock:
                self._fields[key] = cached
        return cached

    def sample(self, index: int, crop: int, seed: int, flip_prob: float = 0.5, connectivity: int = 4) -> Sample:
        """Seeded crop/flip of a pair together with its distance field"""
        image, labels = self.pairs[index]
        field = self.distance(index, connectivity)
        y0, x0, flip = crop_params(labels.shape, crop, seed, flip_prob)
        return Sample(
            apply_crop_flip(image, y0, x0, crop, flip),
            apply_crop_flip(labels, y0, x0, crop, flip),
            DistanceField(apply_crop_flip(field.d, y0, x0, crop, flip), field.connectivity),
        )
