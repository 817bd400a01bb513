"""
Minimal reverse-mode tensor library.

A Tensor wraps a numpy array. Every op returns a new Tensor whose _backward
closure pushes the output gradient into its parents; Tensor.backward() runs
those closures in reverse topological order. Layout is always NCHW.
"""
import contextlib
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..models import InvalidArgumentError, NumericalError, ShapeError

logger = logging.getLogger(__name__)

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    def __init__(self, data, requires_grad: bool = False, _children=(), _op: str = ""):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._backward: Callable[[], None] = lambda: None
        self._prev = tuple(_children)
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if not self.requires_grad:
            return
        g = g.astype(self.data.dtype, copy=False)
        self.grad = g.copy() if self.grad is None else self.grad + g

    def backward(self, grad: Optional[np.ndarray] = None):
        if grad is None:
            if self.data.size != 1:
                raise InvalidArgumentError("backward() without a gradient needs a scalar tensor")
            grad = np.ones_like(self.data)

        # iterative topological sort; graphs are deep enough to worry about recursion
        topo, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in visited:
                    stack.append((child, False))

        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node.grad is not None:
                node._backward()

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op='{self._op}')"


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def as_tensor(value: Union[Tensor, np.ndarray]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    track = grad_enabled() and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=track, _children=parents if track else (), _op=op)


def _expect_ndim(op: str, t: Tensor, ndim: int):
    if t.ndim != ndim:
        raise ShapeError(op, t.shape, (None,) * ndim)


# --- Core ops ---

def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: Optional[int] = None) -> Tensor:
    """
    Cross-correlation of x (N, C, H, W) with weight (O, C, kh, kw). Default
    padding (k - 1) // 2 keeps pixel centres aligned; stride 1 or 2.
    """
    _expect_ndim("conv2d", x, 4)
    _expect_ndim("conv2d", weight, 4)
    if x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    if stride not in (1, 2):
        raise InvalidArgumentError(f"conv2d stride must be 1 or 2, got {stride}")
    _, _, kh, kw = weight.shape
    if padding is None:
        padding = (kh - 1) // 2
    n, c, h, w = x.shape
    p = padding

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = windows.shape[2], windows.shape[3]
    if out_h < 1 or out_w < 1:
        raise ShapeError("conv2d", x.shape, weight.shape)
    # (N, Ho, Wo, O) -> (N, O, Ho, Wo)
    data = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = _result(np.ascontiguousarray(data), (x, weight), "conv2d")

    def _backward():
        g = out.grad
        if weight.requires_grad:
            weight._accumulate(np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3])))
        if x.requires_grad:
            cols = np.tensordot(g, weight.data, axes=([1], [0]))   # (N, Ho, Wo, C, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += \
                        cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            x._accumulate(dxp[:, :, p:p + h, p:p + w])

    out._backward = _backward
    return out


def bias_add(x: Tensor, bias: Tensor) -> Tensor:
    _expect_ndim("bias_add", x, 4)
    if bias.shape != (x.shape[1],):
        raise ShapeError("bias_add", x.shape, bias.shape)
    out = _result(x.data + bias.data[None, :, None, None], (x, bias), "bias_add")

    def _backward():
        x._accumulate(out.grad)
        bias._accumulate(out.grad.sum(axis=(0, 2, 3)))

    out._backward = _backward
    return out


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    out = _result(np.where(active, x.data, 0).astype(x.dtype), (x,), "relu")

    def _backward():
        x._accumulate(out.grad * active)

    out._backward = _backward
    return out


def max_pool2x(x: Tensor) -> Tensor:
    _expect_ndim("max_pool2x", x, 4)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError("max_pool2x", x.shape, (n, c, h - h % 2, w - w % 2))
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    winner = blocks.argmax(axis=-1)   # first maximum wins ties
    out = _result(np.take_along_axis(blocks, winner[..., None], axis=-1)[..., 0], (x,), "max_pool2x")

    def _backward():
        routed = (np.arange(4) == winner[..., None]) * out.grad[..., None]
        x._accumulate(routed.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w))

    out._backward = _backward
    return out


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    _expect_ndim("upsample2x", x, 4)
    n, c, h, w = x.shape
    out = _result(x.data.repeat(2, axis=2).repeat(2, axis=3), (x,), "upsample2x")

    def _backward():
        x._accumulate(out.grad.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    out._backward = _backward
    return out


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    first = tensors[0]
    for t in tensors[1:]:
        if t.ndim != first.ndim or any(a != b for k, (a, b) in enumerate(zip(t.shape, first.shape)) if k != axis):
            raise ShapeError("concat", first.shape, t.shape)
    out = _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _backward():
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            index = [slice(None)] * out.ndim
            index[axis] = slice(int(lo), int(hi))
            t._accumulate(out.grad[tuple(index)])

    out._backward = _backward
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("add", a.shape, b.shape)
    out = _result(a.data + b.data, (a, b), "add")

    def _backward():
        a._accumulate(out.grad)
        b._accumulate(out.grad)

    out._backward = _backward
    return out


def add_constant(x: Tensor, value: np.ndarray) -> Tensor:
    """x + value, value broadcast against x and never differentiated."""
    value = np.asarray(value, dtype=x.dtype)
    try:
        data = x.data + value
    except ValueError:
        raise ShapeError("add_constant", x.shape, value.shape)
    if data.shape != x.shape:
        raise ShapeError("add_constant", x.shape, value.shape)
    out = _result(data, (x,), "add_constant")

    def _backward():
        x._accumulate(out.grad)

    out._backward = _backward
    return out


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = _result(x.data.reshape(shape), (x,), "reshape")

    def _backward():
        x._accumulate(out.grad.reshape(x.shape))

    out._backward = _backward
    return out


def softmax_cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """
    Mean per-pixel cross-entropy of logits (N, K, H, W) against integer class
    labels (N, H, W).
    """
    _expect_ndim("softmax_cross_entropy", logits, 4)
    target = np.asarray(target)
    n, k, h, w = logits.shape
    if target.shape != (n, h, w):
        raise ShapeError("softmax_cross_entropy", logits.shape, target.shape)
    if target.size and (target.min() < 0 or target.max() >= k):
        raise InvalidArgumentError(f"class labels must lie in [0, {k})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    picked = np.take_along_axis(log_p, target[:, None].astype(np.int64), axis=1)
    count = max(n * h * w, 1)
    out = _result(np.asarray(-picked.sum() / count, dtype=logits.dtype), (logits,), "softmax_cross_entropy")

    def _backward():
        probs = np.exp(log_p)
        onehot = np.arange(k)[None, :, None, None] == target[:, None]
        logits._accumulate((probs - onehot) * (out.grad / count))

    out._backward = _backward
    return out


# --- Gradient checking ---

@dataclass
class GradCheckReport:
    name: str
    tolerance: float
    per_input: List[float] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max(self.per_input) if self.per_input else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _check_finite(name: str, values: np.ndarray):
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"{name}: non-finite values during gradient check")


def grad_check(op: Callable[..., Tensor], inputs: Sequence[Union[Sequence[int], np.ndarray]],
               tolerance: float = 1e-4, rng: Optional[np.random.Generator] = None,
               eps: float = 1e-5, directions: int = 3, name: str = "") -> GradCheckReport:
    """
    Compare the analytic directional derivative of sum(r * op(inputs)) with a
    central difference along random unit directions, per input, in double
    precision. inputs are shapes (drawn standard normal) or explicit arrays.
    """
    rng = rng or np.random.default_rng(0)
    arrays = [
        np.array(spec, dtype=np.float64) if isinstance(spec, np.ndarray) else rng.normal(size=tuple(spec))
        for spec in inputs
    ]
    for a in arrays:
        _check_finite(name or "grad_check", a)

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*leaves)
    _check_finite(name or "grad_check", out.data)
    weights = rng.normal(size=out.shape)
    out.backward(weights)

    def objective(values):
        with no_grad():
            result = op(*[Tensor(v) for v in values]).data
        _check_finite(name or "grad_check", result)
        return float(np.sum(weights * result))

    report = GradCheckReport(name=name or getattr(op, "__name__", "op"), tolerance=tolerance)
    for index, leaf in enumerate(leaves):
        grad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        _check_finite(report.name, grad)
        worst = 0.0
        for _ in range(directions):
            v = rng.normal(size=leaf.shape)
            v /= max(np.linalg.norm(v), 1e-12)
            plus = [a if k != index else a + eps * v for k, a in enumerate(arrays)]
            minus = [a if k != index else a - eps * v for k, a in enumerate(arrays)]
            numeric = (objective(plus) - objective(minus)) / (2.0 * eps)
            analytic = float(np.sum(grad * v))
            scale = max(abs(numeric), abs(analytic), 1e-8)
            worst = max(worst, abs(numeric - analytic) / scale)
        report.per_input.append(worst)
    logger.debug(f"grad_check {report.name}: max relative error {report.max_rel_error:.3e}")
    return report
