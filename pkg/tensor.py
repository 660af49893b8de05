"""
Dense tensors with a reverse-mode gradient tape.

Tensors wrap row-major numpy buffers (32-bit by default, 64-bit inside
``precision(np.float64)`` for gradient checks). Every differentiable op that
touches a tensor with ``requires_grad`` appends a node to the calling thread's
tape; ``backward`` walks that tape once, in reverse record order, and then
retires it. Independent tapes may live on different worker threads.
"""
import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import DimensionError, GeometryError, NumericError, ParameterError, UsageError

_state = threading.local()

Number = Union[int, float]


def default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextmanager
def precision(dtype):
    """Create new tensors with the given float dtype inside the block"""
    previous = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = previous


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Run ops without recording them"""
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable operations

    Ops are appended as they execute, so inputs are always recorded before the
    ops that consume them. A tape can be driven backward exactly once.
    """

    def __init__(self):
        self.nodes: List[_Node] = []
        self.consumed = False
        self._previous = None

    def record(self, node: _Node) -> None:
        if self.consumed:
            raise UsageError("cannot record onto a tape that has already run backward")
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        self._previous = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._previous
        self._previous = None


def current_tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None or tape.consumed:
        tape = Tape()
        _state.tape = tape
    return tape


class Tensor:
    """N-dimensional float array that can take part in gradient recording"""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        array = np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(default_dtype())
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=default_dtype()))


def zeros(shape, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=default_dtype()), requires_grad=requires_grad, name=name)


def ones_like(x: Tensor) -> Tensor:
    return Tensor(np.ones_like(x.data))


def _make(data: np.ndarray, inputs: Sequence[Optional[Tensor]], backward_fn: Callable) -> Tensor:
    """Wrap an op result and record it when any input needs a gradient"""
    needs = grad_enabled() and any(t is not None and t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape = current_tape()
        tape.record(_Node(tuple(inputs), out, backward_fn))
        out._tape = tape
    return out


def custom_op(data: np.ndarray, inputs: Sequence[Optional[Tensor]], backward_fn: Callable) -> Tensor:
    """Record an op defined outside this module

    ``backward_fn`` maps the output gradient to one gradient (or None) per input.
    """
    return _make(data, inputs, backward_fn)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor of the loss's tape that requires one"""
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise UsageError("loss was not recorded on a tape (no input requires a gradient)")
    if tape.consumed:
        raise UsageError("backward already ran for this tape; record the forward pass again")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        input_grads = node.backward_fn(g)
        for tensor, tensor_grad in zip(node.inputs, input_grads):
            if tensor is None or tensor_grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + tensor_grad
            else:
                grads[key] = tensor_grad

    seen = set()
    for node in tape.nodes:
        for tensor in (*node.inputs, node.output):
            if tensor is None or not tensor.requires_grad or id(tensor) in seen:
                continue
            seen.add(id(tensor))
            g = grads.get(id(tensor))
            g = np.zeros_like(tensor.data) if g is None else np.asarray(g, dtype=tensor.dtype).reshape(tensor.shape)
            if tensor.is_leaf and tensor.grad is not None:
                tensor.grad = tensor.grad + g
            else:
                tensor.grad = g

    tape.consumed = True
    tape.nodes = []


# ---------------------------------------------------------------------------
# Pointwise and reduction ops
# ---------------------------------------------------------------------------

def _check_same_shape(x: Tensor, y: Tensor, op: str) -> None:
    if x.shape != y.shape:
        raise DimensionError(f"{op} needs identical shapes, got {x.shape} and {y.shape}")


def add(x: Tensor, y) -> Tensor:
    if isinstance(y, Tensor):
        _check_same_shape(x, y, "add")
        return _make(x.data + y.data, (x, y), lambda g: (g, g))
    return _make(x.data + y, (x,), lambda g: (g,))


def sub(x: Tensor, y) -> Tensor:
    if isinstance(y, Tensor):
        _check_same_shape(x, y, "sub")
        return _make(x.data - y.data, (x, y), lambda g: (g, -g))
    return _make(x.data - y, (x,), lambda g: (g,))


def mul(x: Tensor, y) -> Tensor:
    if isinstance(y, Tensor):
        _check_same_shape(x, y, "multiply")
        xd, yd = x.data, y.data
        return _make(xd * yd, (x, y), lambda g: (g * yd, g * xd))
    return _make(x.data * y, (x,), lambda g: (g * y,))


def div(x: Tensor, y) -> Tensor:
    if isinstance(y, Tensor):
        _check_same_shape(x, y, "divide")
        xd, yd = x.data, y.data
        return _make(xd / yd, (x, y), lambda g: (g / yd, -g * xd / (yd * yd)))
    return _make(x.data / y, (x,), lambda g: (g / y,))


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,))


def _expand_grad(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape).copy()


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    return _make(out, (x,), lambda g: (_expand_grad(g, shape, axis, keepdims),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    count = x.data.size // max(out.size, 1)
    return _make(out, (x,), lambda g: (_expand_grad(g, shape, axis, keepdims) / count,))


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(original),))


def log_clamped(x: Tensor, eps: float) -> Tensor:
    """ln(max(x, eps)); no gradient flows through the floor"""
    xd = x.data
    floored = np.maximum(xd, eps)

    def backward_fn(g):
        return (np.where(xd > eps, g / floored, 0.0).astype(xd.dtype),)

    return _make(np.log(floored), (x,), backward_fn)


def l2_norm(x: Tensor, axis: int = 1) -> Tensor:
    """Euclidean norm along an axis, with a zero subgradient at the origin"""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis))

    def backward_fn(g):
        safe = np.expand_dims(np.where(norm > 0, norm, 1.0), axis)
        scale = np.expand_dims(np.where(norm > 0, g, 0.0), axis)
        return ((scale * xd / safe).astype(xd.dtype),)

    return _make(norm, (x,), backward_fn)


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    xd = x.data
    positive = xd > 0
    out = np.where(positive, xd, slope * xd).astype(xd.dtype)
    return _make(out, (x,), lambda g: (np.where(positive, g, slope * g).astype(xd.dtype),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    reference = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(reference) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, reference)) if i != axis % len(reference)
        ):
            raise DimensionError(f"concat needs identical non-channel extents, got {reference} and {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), backward_fn)


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an N×Cin×H×W input with a Cout×Cin×k×k kernel"""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d needs 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    out_c, w_c, k, k2 = weight.shape
    if w_c != c:
        raise DimensionError(f"input has {c} channels but the kernel expects {w_c}")
    if k != k2 or k % 2 == 0:
        raise GeometryError(f"conv2d needs a square odd kernel, got {k}x{k2}")
    if stride < 1 or padding < 0:
        raise ParameterError(f"invalid stride {stride} or padding {padding}")
    if bias is not None and bias.shape != (out_c,):
        raise DimensionError(f"bias shape {bias.shape} does not match {out_c} output channels")
    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (w + 2 * padding - k) // stride + 1
    if out_h < 1 or out_w < 1:
        raise GeometryError(f"conv2d output extent {out_h}x{out_w} is not positive")

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
    out = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward_fn(g):
        grad_x = grad_w = grad_b = None
        if weight.requires_grad:
            grad_w = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            grad_b = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dcols = np.tensordot(g, weight.data, axes=([1], [0]))
            grad_padded = np.zeros_like(padded)
            span_h = stride * (out_h - 1) + 1
            span_w = stride * (out_w - 1) + 1
            for i in range(k):
                for j in range(k):
                    grad_padded[:, :, i:i + span_h:stride, j:j + span_w:stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
            grad_x = grad_padded[:, :, padding:padding + h, padding:padding + w]
        return grad_x, grad_w, grad_b

    return _make(out, (x, weight, bias), backward_fn)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Transposed convolution with a Cin×Cout×k×k kernel (the gradient of conv2d)"""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv_transpose2d needs 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    w_c, out_c, k, k2 = weight.shape
    if w_c != c:
        raise DimensionError(f"input has {c} channels but the kernel expects {w_c}")
    if k != k2:
        raise GeometryError("conv_transpose2d needs a square kernel")
    if stride < 1 or padding < 0:
        raise ParameterError(f"invalid stride {stride} or padding {padding}")
    if bias is not None and bias.shape != (out_c,):
        raise DimensionError(f"bias shape {bias.shape} does not match {out_c} output channels")
    full_h = (h - 1) * stride + k
    full_w = (w - 1) * stride + k
    out_h = full_h - 2 * padding
    out_w = full_w - 2 * padding
    if out_h < 1 or out_w < 1:
        raise GeometryError(f"conv_transpose2d output extent {out_h}x{out_w} is not positive")

    span_h = stride * (h - 1) + 1
    span_w = stride * (w - 1) + 1
    cols = np.tensordot(x.data, weight.data, axes=([1], [0]))
    full = np.zeros((n, out_c, full_h, full_w), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            full[:, :, i:i + span_h:stride, j:j + span_w:stride] += cols[..., i, j].transpose(0, 3, 1, 2)
    out = full[:, :, padding:padding + out_h, padding:padding + out_w]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward_fn(g):
        grad_x = grad_w = grad_b = None
        grad_full = np.zeros((n, out_c, full_h, full_w), dtype=g.dtype)
        grad_full[:, :, padding:padding + out_h, padding:padding + out_w] = g
        gcols = np.empty((n, out_c, h, w, k, k), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gcols[..., i, j] = grad_full[:, :, i:i + span_h:stride, j:j + span_w:stride]
        if x.requires_grad:
            grad_x = np.tensordot(gcols, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if weight.requires_grad:
            grad_w = np.tensordot(x.data, gcols, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            grad_b = g.sum(axis=(0, 2, 3))
        return grad_x, grad_w, grad_b

    return _make(out, (x, weight, bias), backward_fn)


def batch_norm2d(x: Tensor, gamma: Tensor, beta_p: Tensor, eps: float = 1e-5, mode: str = "train",
                 running_mean: Optional[np.ndarray] = None, running_var: Optional[np.ndarray] = None,
                 momentum: float = 0.1) -> Tensor:
    """Per-channel normalization; train mode also updates the running statistics in place"""
    if eps <= 0:
        raise ParameterError(f"batch norm eps must be positive, got {eps}")
    if x.ndim != 4:
        raise DimensionError(f"batch_norm2d needs a 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta_p.shape != (c,):
        raise DimensionError(f"gamma/beta must have shape ({c},)")
    axes = (0, 2, 3)
    population = n * h * w
    xd = x.data
    if mode == "train":
        if population < 2:
            raise GeometryError(f"batch norm needs at least 2 values per channel, got {population}")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
        if running_var is not None:
            running_var *= 1.0 - momentum
            running_var += momentum * var * population / (population - 1)
    elif mode == "eval":
        if running_mean is None or running_var is None:
            raise UsageError("eval-mode batch norm needs running statistics")
        mu, var = running_mean.astype(xd.dtype), running_var.astype(xd.dtype)
    else:
        raise UsageError(f"unknown batch norm mode {mode!r}")

    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta_p.data[None, :, None, None]

    def backward_fn(g):
        grad_gamma = (g * xhat).sum(axis=axes)
        grad_beta = g.sum(axis=axes)
        gxhat = g * gamma.data[None, :, None, None]
        if mode == "train":
            grad_x = (inv[None, :, None, None] / population) * (
                population * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            grad_x = gxhat * inv[None, :, None, None]
        return grad_x, grad_gamma, grad_beta

    return _make(out, (x, gamma, beta_p), backward_fn)


def _bilinear_matrix(size: int, factor: int, dtype) -> np.ndarray:
    out_size = size * factor
    src = (np.arange(out_size) + 0.5) / factor - 0.5
    src = np.clip(src, 0, size - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, size - 1)
    frac = src - lo
    matrix = np.zeros((out_size, size), dtype=dtype)
    rows = np.arange(out_size)
    np.add.at(matrix, (rows, lo), 1.0 - frac)
    np.add.at(matrix, (rows, hi), frac)
    return matrix


def upsample_bilinear(x: Tensor, factor: int = 2) -> Tensor:
    """Parameter-free bilinear upsampling (half-pixel centres)"""
    if x.ndim != 4:
        raise DimensionError(f"upsample_bilinear needs a 4-d input, got {x.shape}")
    _, _, h, w = x.shape
    a_h = _bilinear_matrix(h, factor, x.dtype)
    a_w = _bilinear_matrix(w, factor, x.dtype)
    tmp = np.tensordot(x.data, a_h, axes=([2], [1]))
    out = np.tensordot(tmp, a_w, axes=([2], [1]))

    def backward_fn(g):
        back = np.tensordot(g, a_w, axes=([3], [0]))
        return (np.tensordot(back, a_h, axes=([2], [0])).transpose(0, 1, 3, 2),)

    return _make(out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: Dict, lr: float,
              betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, applied to ``params`` and ``state`` in place"""
    beta1, beta2 = betas
    if state.get("step", 0) < 0:
        raise UsageError("Adam step counter must be >= 0")
    m_buffers = state.setdefault("m", [np.zeros_like(p.data) for p in params])
    v_buffers = state.setdefault("v", [np.zeros_like(p.data) for p in params])
    if len(m_buffers) != len(params) or len(v_buffers) != len(params):
        raise DimensionError("optimizer state does not match the parameter list")

    for index, (param, grad) in enumerate(zip(params, grads)):
        if grad is None:
            continue
        if m_buffers[index].shape != param.shape or grad.shape != param.shape:
            raise DimensionError(f"optimizer buffers do not match parameter {param.name or index}")
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient in parameter {param.name or index}")

    state["step"] = state.get("step", 0) + 1
    t = state["step"]
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    for param, grad, m, v in zip(params, grads, m_buffers, v_buffers):
        if grad is None:
            continue
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        param.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype)


class Adam:
    """Adam optimizer over a fixed parameter list"""

    def __init__(self, params: Iterable[Tensor], lr: float = 8e-5, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.state: Dict = {"step": 0}

    def zero_grad(self) -> None:
        for param in self.params:
            param.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr, self.betas, self.eps)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-3, rtol: float = 1e-3,
              atol: float = 1e-6, samples: Optional[int] = None, seed: int = 0) -> Dict[str, float]:
    """Compare analytic gradients with central differences

    ``fn`` recomputes a scalar from ``inputs`` (closing over them); inputs are
    perturbed in place. Returns the worst violation ratio per input, where a
    value <= 1 means every checked element satisfied
    ``|analytic - numeric| <= atol + rtol * max(|analytic|, |numeric|)``.
    ``samples`` limits the number of elements checked per input.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise UsageError("gradcheck runs in 64-bit mode; convert inputs to float64 first")

    for t in inputs:
        t.grad = None
    loss = fn()
    backward(loss)
    analytic = [np.array(t.grad, copy=True) for t in inputs]

    rng = np.random.default_rng(seed)
    worst: Dict[str, float] = {}
    for position, t in enumerate(inputs):
        t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        indices = np.arange(flat.size)
        if samples is not None and samples < flat.size:
            indices = np.sort(rng.choice(flat.size, size=samples, replace=False))
        ratio = 0.0
        for index in indices:
            original = flat[index]
            with no_grad():
                flat[index] = original + h
                upper = fn().item()
                flat[index] = original - h
                lower = fn().item()
            flat[index] = original
            numeric = (upper - lower) / (2 * h)
            exact = analytic[position].reshape(-1)[index]
            bound = atol + rtol * max(abs(exact), abs(numeric))
            ratio = max(ratio, abs(exact - numeric) / bound)
        worst[t.name or f"input{position}"] = ratio
    return worst
