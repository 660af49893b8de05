"""
Encoder-decoder network with two Enhanced Screening Modules (ESM).

The encoder reduces an N x C x H x W feature image to a 1/16 bottleneck G
through five levels. The decoder climbs back to full resolution; at the two
finest scales an ESM deconvolves G straight to that scale, turns it into a gate
and fuses it as M = gate * S + L, where S is the decoder feature and L the
encoder skip feature. The head concatenates M1 with the upsampled M2 and emits
the 9-way association map Q.
"""
import json
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from config import NetConfig
from errors import DimensionError, GeometryError, UnreadableFileError
from tensor import (Tensor, add, batch_norm2d, concat, conv2d, conv_transpose2d, leaky_relu, mul, softmax,
                    upsample_bilinear)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"BSPX"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Conv2d:
    """k x k convolution, 'same' padding"""

    def __init__(self, name: str, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1):
        self.stride = stride
        self.padding = kernel_size // 2
        self.weight = Tensor(np.zeros((out_channels, in_channels, kernel_size, kernel_size), dtype=np.float32),
                             requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(out_channels, dtype=np.float32), requires_grad=True, name=f"{name}.bias")
        self.fan_in = in_channels * kernel_size * kernel_size

    def parameters(self) -> List[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d:
    """Transposed convolution with kernel size equal to a multiple of the stride"""

    def __init__(self, name: str, in_channels: int, out_channels: int, kernel_size: int, stride: int):
        self.stride = stride
        self.weight = Tensor(np.zeros((in_channels, out_channels, kernel_size, kernel_size), dtype=np.float32),
                             requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(out_channels, dtype=np.float32), requires_grad=True, name=f"{name}.bias")
        # each output pixel receives (k / stride)^2 taps from every input channel
        self.fan_in = in_channels * max(1, kernel_size // stride) ** 2

    def parameters(self) -> List[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self.weight, self.bias, self.stride, 0)


class BatchNorm2d:
    def __init__(self, name: str, channels: int, eps: float, momentum: float):
        self.name = name
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.training = True

    def parameters(self) -> List[Tensor]:
        return [self.gamma, self.beta]

    def buffers(self) -> List[Tuple[str, np.ndarray]]:
        return [(f"{self.name}.running_mean", self.running_mean), (f"{self.name}.running_var", self.running_var)]

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm2d(x, self.gamma, self.beta, self.eps, "train" if self.training else "eval",
                            self.running_mean, self.running_var, self.momentum)


class ConvBlock:
    """conv -> batch norm -> leaky ReLU"""

    def __init__(self, name: str, conv, channels: int, cfg: NetConfig):
        self.conv = conv
        self.norm = BatchNorm2d(f"{name}.bn", channels, cfg.bn_eps, cfg.bn_momentum)
        self.slope = cfg.leaky_slope

    def layers(self):
        return [self.conv, self.norm]

    def __call__(self, x: Tensor) -> Tensor:
        return leaky_relu(self.norm(self.conv(x)), self.slope)


@dataclass
class Activations:
    """Named intermediate features of one forward pass"""

    L1: Tensor
    L2: Tensor
    G: Tensor
    S1: Tensor
    S2: Tensor
    M1: Tensor
    M2: Tensor
    Q: Tensor


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

class ESMNet:
    """Superpixel association network with cascaded screening modules"""

    def __init__(self, cfg: Optional[NetConfig] = None, seed: int = 0):
        self.cfg = (cfg or NetConfig()).validate()
        self.seed = seed
        cfg = self.cfg
        k = cfg.kernel_size
        c = list(cfg.channels)

        self.encoder: List[List[ConvBlock]] = []
        previous = cfg.in_channels
        for level, width in enumerate(c):
            stride = 1 if level == 0 else 2
            first = ConvBlock(f"enc{level + 1}a", Conv2d(f"enc{level + 1}a.conv", previous, width, k, stride),
                              width, cfg)
            second = ConvBlock(f"enc{level + 1}b", Conv2d(f"enc{level + 1}b.conv", width, width, k), width, cfg)
            self.encoder.append([first, second])
            previous = width

        # decoder: 1/16 -> 1/8 -> 1/4 -> 1/2 (S2) -> 1 (S1)
        self.decoder: List[List[ConvBlock]] = []
        plan = [(c[4], c[3]), (c[3], c[2]), (c[2], c[1]), (c[1], c[0])]
        for step, (c_in, c_out) in enumerate(plan):
            name = f"dec{len(plan) - step}"
            up = ConvBlock(f"{name}up", ConvTranspose2d(f"{name}up.deconv", c_in, c_out, 2, 2), c_out, cfg)
            refine = ConvBlock(f"{name}", Conv2d(f"{name}.conv", c_out, c_out, k), c_out, cfg)
            self.decoder.append([up, refine])

        # screening branches: deconvolve G straight to the target scale, then gate
        self.esm1_deconv = ConvTranspose2d("esm1.deconv", c[4], c[0], 16, 16)
        self.esm1_conv = Conv2d("esm1.conv", c[0], c[0], k)
        self.esm2_deconv = ConvTranspose2d("esm2.deconv", c[4], c[1], 8, 8)
        self.esm2_conv = Conv2d("esm2.conv", c[1], c[1], k)

        self.head = ConvBlock("head", Conv2d("head.conv", c[0] + c[1], cfg.head_channels, k), cfg.head_channels, cfg)
        self.head_out = Conv2d("head.out", cfg.head_channels, cfg.assoc_channels, 1)

        self.init_weights(seed)

    # -- bookkeeping -------------------------------------------------------

    def _layers(self) -> list:
        """All layers in fixed registration order"""
        layers = []
        for level in self.encoder:
            for block in level:
                layers.extend(block.layers())
        for step in self.decoder:
            for block in step:
                layers.extend(block.layers())
        layers += [self.esm1_deconv, self.esm1_conv, self.esm2_deconv, self.esm2_conv]
        layers += self.head.layers() + [self.head_out]
        return layers

    def parameters(self) -> List[Tensor]:
        return [p for layer in self._layers() for p in layer.parameters()]

    def named_tensors(self) -> List[Tuple[str, np.ndarray]]:
        """Parameters and batch-norm statistics in checkpoint order"""
        out = []
        for layer in self._layers():
            out.extend((p.name, p.data) for p in layer.parameters())
            if isinstance(layer, BatchNorm2d):
                out.extend(layer.buffers())
        return out

    def weight_layers(self) -> list:
        return [layer for layer in self._layers() if isinstance(layer, (Conv2d, ConvTranspose2d))]

    def init_weights(self, seed: int) -> None:
        """Fan-in scaled uniform weights U(+-sqrt(6 / fan_in)); zero biases; unit BN scale"""
        rng = np.random.default_rng(seed)
        self.seed = seed
        for layer in self._layers():
            if isinstance(layer, BatchNorm2d):
                layer.gamma.data[...] = 1.0
                layer.beta.data[...] = 0.0
                layer.running_mean[...] = 0.0
                layer.running_var[...] = 1.0
                continue
            bound = np.sqrt(6.0 / layer.fan_in)
            layer.weight.data = rng.uniform(-bound, bound, size=layer.weight.shape).astype(layer.weight.dtype)
            layer.bias.data[...] = 0.0

    def train(self) -> "ESMNet":
        for layer in self._layers():
            if isinstance(layer, BatchNorm2d):
                layer.training = True
        return self

    def eval(self) -> "ESMNet":
        for layer in self._layers():
            if isinstance(layer, BatchNorm2d):
                layer.training = False
        return self

    def astype(self, dtype) -> "ESMNet":
        """Cast every parameter and statistic in place (64-bit for gradient checks)"""
        for layer in self._layers():
            for p in layer.parameters():
                p.data = p.data.astype(dtype)
                p.grad = None
            if isinstance(layer, BatchNorm2d):
                layer.running_mean = layer.running_mean.astype(dtype)
                layer.running_var = layer.running_var.astype(dtype)
        return self

    # -- forward -----------------------------------------------------------

    def encode(self, x: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise DimensionError(f"expected N x {self.cfg.in_channels} x H x W features, got {x.shape}")
        h, w = x.shape[2:]
        if h % self.cfg.downsample or w % self.cfg.downsample:
            raise GeometryError(f"extents {h}x{w} must be divisible by {self.cfg.downsample}")
        features = []
        for first, second in self.encoder:
            x = second(first(x))
            features.append(x)
        return features[0], features[1], features[-1]

    def _decode(self, G: Tensor) -> Tuple[Tensor, Tensor]:
        x = G
        outputs = []
        for up, refine in self.decoder:
            x = refine(up(x))
            outputs.append(x)
        return outputs[-1], outputs[-2]

    def _gate(self, G: Tensor, deconv: ConvTranspose2d, conv: Conv2d, like: Tensor,
              gate_override: Optional[float]) -> Optional[Tensor]:
        if gate_override is not None:
            return Tensor(np.full(like.shape, gate_override, dtype=like.dtype))
        if not self.cfg.esm_gate:
            return None
        return conv(leaky_relu(deconv(G), self.cfg.leaky_slope))

    def _screen(self, gate: Optional[Tensor], S: Tensor, L: Tensor, skip: bool) -> Tensor:
        M = S if gate is None else mul(gate, S)
        return add(M, L) if skip else M

    def decode_with_esm(self, L1: Tensor, L2: Tensor, G: Tensor, gate_override: Optional[float] = None,
                        skip: Optional[bool] = None) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
        """Decoder features and their screened fusions: M = gate * S + L

        ``gate_override`` replaces the gate branch with a constant map and
        ``skip`` overrides the config's skip addition; both serve ablations.
        """
        S1, S2 = self._decode(G)
        skip = self.cfg.esm_skip if skip is None else skip
        gate1 = self._gate(G, self.esm1_deconv, self.esm1_conv, S1, gate_override)
        gate2 = self._gate(G, self.esm2_deconv, self.esm2_conv, S2, gate_override)
        M1 = self._screen(gate1, S1, L1, skip)
        M2 = self._screen(gate2, S2, L2, skip)
        return S1, S2, M1, M2

    def assoc_head(self, M1: Tensor, M2: Tensor) -> Tensor:
        merged = concat([M1, upsample_bilinear(M2, 2)], axis=1)
        return softmax(self.head_out(self.head(merged)), axis=1)

    def forward_all(self, x: Tensor) -> Activations:
        L1, L2, G = self.encode(x)
        S1, S2, M1, M2 = self.decode_with_esm(L1, L2, G)
        return Activations(L1, L2, G, S1, S2, M1, M2, self.assoc_head(M1, M2))

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_all(x).Q

    __call__ = forward

    # -- persistence -------------------------------------------------------

    def save_checkpoint(self, path) -> Path:
        """Write the parameter set as magic + JSON header + float32 payload"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tensors = self.named_tensors()
        header = {
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.cfg),
            "seed": self.seed,
            "tensors": [{"name": name, "shape": list(data.shape)} for name, data in tensors],
        }
        encoded = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            for _, data in tensors:
                f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
        logger.info(f"Saved checkpoint with {len(tensors)} tensors to {path}")
        return path

    @classmethod
    def load_checkpoint(cls, path) -> "ESMNet":
        path = Path(path)
        try:
            raw = path.read_bytes()
        except OSError as e:
            raise UnreadableFileError(f"cannot read checkpoint {path}: {e}")
        if raw[:4] != CHECKPOINT_MAGIC or len(raw) < 8:
            raise UnreadableFileError(f"{path} is not a checkpoint file")
        (length,) = struct.unpack("<I", raw[4:8])
        try:
            header = json.loads(raw[8:8 + length].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise UnreadableFileError(f"corrupt checkpoint header in {path}: {e}")

        try:
            config = dict(header["config"])
            config["channels"] = tuple(config["channels"])
            entries = [(e["name"], tuple(e["shape"])) for e in header["tensors"]]
            net = cls(NetConfig(**config), seed=int(header.get("seed", 0)))
        except (KeyError, TypeError, ValueError) as e:
            raise UnreadableFileError(f"checkpoint header in {path} is incomplete: {e!r}")
        targets: Dict[str, np.ndarray] = dict(net.named_tensors())
        offset = 8 + length
        for name, shape in entries:
            if name not in targets or targets[name].shape != shape:
                raise UnreadableFileError(f"checkpoint tensor {name} {shape} does not fit the network")
            count = int(np.prod(shape))
            chunk = raw[offset:offset + 4 * count]
            if len(chunk) != 4 * count:
                raise UnreadableFileError(f"checkpoint {path} is truncated at tensor {name}")
            targets[name][...] = np.frombuffer(chunk, dtype="<f4").reshape(shape)
            offset += 4 * count
        logger.info(f"Loaded checkpoint {path} (seed {net.seed})")
        return net


def init_weights(cfg: NetConfig, seed: int) -> ESMNet:
    """Freshly initialized network for a config and seed"""
    return ESMNet(cfg, seed)
