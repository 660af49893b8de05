"""
Configuration management for the superpixel engine.

All tunables live in small dataclasses that validate themselves. A RunConfig
bundles them, round-trips through JSON, accepts dotted key=value overrides
and picks up environment settings the way a deployment would expect.
"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from errors import ParameterError, UsageError

logger = logging.getLogger(__name__)

SNAPSHOT_NAME = "resolved_config.json"


@dataclass
class BalConfig:
    """Boundary-Aware Label encoding parameters"""

    C: int = 50
    delta_mu: int = 10
    beta: float = 1.2
    alpha: float = 0.5
    sigma_min: float = 0.3
    sigma_max: float = 1.2
    support_radius: int = 4
    eps_log: float = 1e-12
    connectivity: int = 4

    @property
    def K(self) -> int:
        """Length of a label vector"""
        return self.delta_mu * (self.C - 1) + 1

    def validate(self) -> "BalConfig":
        if self.C < 1:
            raise ParameterError(f"C must be >= 1, got {self.C}")
        if not 0 < self.sigma_min <= self.sigma_max:
            raise ParameterError(f"need 0 < sigma_min <= sigma_max, got {self.sigma_min}, {self.sigma_max}")
        if not self.support_radius < self.delta_mu / 2:
            raise ParameterError(
                f"support_radius {self.support_radius} must be < delta_mu/2 = {self.delta_mu / 2}"
            )
        if self.support_radius < 0:
            raise ParameterError("support_radius must be >= 0")
        if self.alpha <= 0 or self.beta <= 0:
            raise ParameterError(f"alpha and beta must be positive, got {self.alpha}, {self.beta}")
        if self.eps_log <= 0:
            raise ParameterError("eps_log must be positive")
        if self.connectivity not in (4, 8):
            raise ParameterError(f"connectivity must be 4 or 8, got {self.connectivity}")
        return self


@dataclass
class NetConfig:
    """ESM network layout"""

    in_channels: int = 5
    channels: Tuple[int, ...] = (16, 32, 64, 128, 128)
    assoc_channels: int = 9
    kernel_size: int = 3
    leaky_slope: float = 0.1
    head_channels: int = 32
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    esm_gate: bool = True
    esm_skip: bool = True

    @property
    def downsample(self) -> int:
        return 2 ** (len(self.channels) - 1)

    def validate(self) -> "NetConfig":
        if self.in_channels not in (3, 5):
            raise ParameterError(f"in_channels must be 3 (LAB) or 5 (LAB+XY), got {self.in_channels}")
        if len(self.channels) != 5:
            raise ParameterError("channel plan must have 5 levels (scales 1 .. 1/16)")
        if self.downsample != 16:
            raise ParameterError("scale path must reach exactly 1/16")
        if self.assoc_channels != 9:
            raise ParameterError("the association head must emit exactly 9 channels")
        if self.kernel_size % 2 != 1:
            raise ParameterError("kernel_size must be odd")
        if self.bn_eps <= 0:
            raise ParameterError("bn_eps must be positive")
        return self


@dataclass
class LossConfig:
    """Training objective and optimizer schedule"""

    m: float = 0.003
    S: int = 16
    eps_log: float = 1e-12
    lr: float = 8e-5
    lr_decay: float = 0.5
    lr_decay_step: int = 8000
    batch: int = 8
    crop: int = 208
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def lr_at(self, iteration: int) -> float:
        """Learning rate in effect at a 0-based iteration"""
        if iteration >= self.lr_decay_step:
            return self.lr * self.lr_decay
        return self.lr

    def validate(self) -> "LossConfig":
        if self.m < 0:
            raise ParameterError(f"m must be >= 0, got {self.m}")
        if self.lr < 0:
            raise ParameterError(f"lr must be >= 0, got {self.lr}")
        if self.S < 1:
            raise ParameterError("S must be >= 1")
        if self.batch < 1:
            raise ParameterError("batch must be >= 1")
        if self.crop % 16 != 0:
            raise ParameterError(f"crop {self.crop} must be divisible by 16")
        return self


@dataclass
class SlicConfig:
    """SLIC baseline parameters"""

    K: int = 100
    compactness: float = 10.0
    iterations: int = 10

    def validate(self) -> "SlicConfig":
        if self.K < 1:
            raise ParameterError("K must be >= 1")
        if self.iterations < 1:
            raise ParameterError("iterations must be >= 1")
        return self


@dataclass
class SyntheticSceneConfig:
    """Random layered-shape scenes used as a desk-scale corpus"""

    height: int = 64
    width: int = 64
    region_range: Tuple[int, int] = (3, 6)
    shapes: Tuple[str, ...] = ("polygon", "ellipse")
    jitter: float = 0.05
    noise: float = 0.02
    seed: int = 0

    def validate(self) -> "SyntheticSceneConfig":
        if self.height % 16 or self.width % 16:
            raise ParameterError(f"extents {self.height}x{self.width} must be divisible by 16")
        lo, hi = self.region_range
        if lo < 2 or hi < lo:
            raise ParameterError(f"region range {self.region_range} must satisfy 2 <= lo <= hi")
        unknown = set(self.shapes) - {"polygon", "ellipse"}
        if unknown or not self.shapes:
            raise ParameterError(f"unknown shapes {sorted(unknown)}")
        if self.jitter < 0 or self.noise < 0:
            raise ParameterError("jitter and noise must be >= 0")
        return self


@dataclass
class TrainConfig:
    """Training-loop cadence and ablation switches"""

    iterations: int = 300
    log_every: int = 10
    checkpoint_every: int = 0
    label_mode: str = "bal"
    flip_prob: float = 0.5
    workers: int = 1

    def validate(self) -> "TrainConfig":
        if self.iterations < 0:
            raise ParameterError("iterations must be >= 0")
        if self.label_mode not in ("bal", "onehot"):
            raise ParameterError(f"label_mode must be 'bal' or 'onehot', got {self.label_mode!r}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ParameterError("flip_prob must lie in [0, 1]")
        if self.workers < 1:
            raise ParameterError("workers must be >= 1")
        return self


@dataclass
class RunConfig:
    """Everything needed to reproduce a run"""

    bal: BalConfig = field(default_factory=BalConfig)
    net: NetConfig = field(default_factory=NetConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    slic: SlicConfig = field(default_factory=SlicConfig)
    synth: SyntheticSceneConfig = field(default_factory=SyntheticSceneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    results_url: Optional[str] = None

    def validate(self) -> "RunConfig":
        for section in (self.bal, self.net, self.loss, self.slic, self.synth, self.train):
            section.validate()
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        config = cls()
        for key, value in data.items():
            if not hasattr(config, key):
                raise UsageError(f"unknown config key {key!r}")
            current = getattr(config, key)
            if is_dataclass(current):
                if not isinstance(value, dict):
                    raise UsageError(f"config section {key!r} must be an object")
                for sub_key, sub_value in value.items():
                    _set_field(current, f"{key}.{sub_key}", sub_key, sub_value)
            else:
                _set_field(config, key, key, value)
        return config

    @classmethod
    def load(cls, path: Optional[str] = None) -> "RunConfig":
        """Load a JSON run-config (defaults when path is None) and apply the environment"""
        if path is None:
            config = cls()
        else:
            try:
                with open(path, "r") as f:
                    config = cls.from_dict(json.load(f))
            except (OSError, json.JSONDecodeError) as e:
                raise UsageError(f"cannot read config {path}: {e}")
        env_url = os.getenv("BIOSPIX_RESULTS_URL")
        if env_url and config.results_url is None:
            config.results_url = env_url
        return config

    def apply_overrides(self, overrides: List[str]) -> "RunConfig":
        """Apply dotted key=value overrides such as loss.lr=1e-3"""
        for item in overrides:
            if "=" not in item:
                raise UsageError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            parts = key.strip().split(".")
            target: Any = self
            for part in parts[:-1]:
                if not hasattr(target, part) or not is_dataclass(getattr(target, part)):
                    raise UsageError(f"unknown config key {key!r}")
                target = getattr(target, part)
            _set_field(target, key, parts[-1], raw.strip(), from_text=True)
        return self

    def save_snapshot(self, directory: str) -> Path:
        """Write the resolved config beside a run's outputs"""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        path = out / SNAPSHOT_NAME
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        return path


def _set_field(target: Any, full_key: str, name: str, value: Any, from_text: bool = False) -> None:
    names = {f.name for f in fields(target)}
    if name not in names:
        raise UsageError(f"unknown config key {full_key!r}")
    current = getattr(target, name)
    try:
        setattr(target, name, _coerce(current, value, from_text))
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad value for {full_key!r}: {value!r} ({e})")


def _coerce(current: Any, value: Any, from_text: bool) -> Any:
    if isinstance(current, bool):
        if isinstance(value, str):
            lowered = value.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError("expected a boolean")
            return lowered in ("true", "1", "yes")
        return bool(value)
    if isinstance(current, int):
        if isinstance(value, float) and not value.is_integer():
            raise ValueError("expected an integer")
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        items = value.split(",") if isinstance(value, str) else list(value)
        kind = type(current[0]) if current else str
        return tuple(_coerce(kind(), item.strip() if isinstance(item, str) else item, from_text) for item in items)
    if current is None:
        if from_text and value.lower() in ("none", "null", ""):
            return None
        return value
    return str(value) if from_text else value
