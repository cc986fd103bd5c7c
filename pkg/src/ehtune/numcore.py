"""Dense float32 tensors with define-by-run reverse-mode differentiation.

Every op returns a fresh array; inputs are never written to. A result records
its parents and a closure mapping the upstream gradient to one gradient per
parent. ``Tensor.backward`` walks that graph once in reverse topological order
and accumulates into the ``grad`` field of leaf tensors only, so the same
graph can be differentiated repeatedly after ``zero_grad``.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, OutOfRangeError, ShapeError

_state = {"dtype": np.dtype(np.float32), "grad_enabled": True}

# tanh-approximate GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
GELU_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
GELU_CUBIC = 0.044715

LAYER_NORM_EPS = 1e-5


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=_state["dtype"])
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    @classmethod
    def _result(cls, data, parents, backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._parents = ()
        out._backward = None
        out.requires_grad = False
        if _state["grad_enabled"] and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self):
        """Populate ``grad`` on every leaf that requires it with d(self)/d(leaf)."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = as_tensor(a)
        scale = b

        def backward_scalar(g):
            return (g * scale,)

        return Tensor._result(a.data * scale, (a,), backward_scalar)
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(a.data * b.data, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    Gradients: dA = dC @ B^T and dB = A^T @ dC, summed over broadcast axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return Tensor._result(out, (a, b), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return Tensor._result(np.transpose(x.data, axes), (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(x.shape),)

    return Tensor._result(out, (x,), backward)


def tensor_sum(x: Tensor, axis=None) -> Tensor:
    out = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return Tensor._result(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return mul(tensor_sum(x, axis), 1.0 / n)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return Tensor._result(np.array(out), (x,), backward)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``; gradient scatters back with a one-hot product."""
    ids = np.asarray(ids)
    flat = ids.reshape(-1)
    out = weight.data[flat].reshape(ids.shape + (weight.shape[1],))

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, flat, g.reshape(-1, weight.shape[1]))
        return (gw,)

    return Tensor._result(out, (weight,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"cannot concatenate shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(out, tuple(tensors), backward)


def broadcast_to(x: Tensor, shape) -> Tensor:
    out = np.broadcast_to(x.data, shape).copy()

    def backward(g):
        return (_unbroadcast(g, x.shape),)

    return Tensor._result(out, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - y * y),)

    return Tensor._result(y, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximate GELU with constants sqrt(2/pi) and 0.044715."""
    t = np.tanh(GELU_SQRT_2_OVER_PI * (x.data + GELU_CUBIC * x.data * x.data * x.data))
    y = 0.5 * x.data * (1.0 + t)

    def backward(g):
        return (g * _gelu_derivative(x.data, t),)

    return Tensor._result(y, (x,), backward)


def _gelu_derivative(x: np.ndarray, t: np.ndarray) -> np.ndarray:
    inner = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * inner


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row maximum."""
    y = _softmax(x.data)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._result(y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm params {gain.shape}, {bias.shape} do not match width {d}")
    # Shifting by the first element first makes constant rows centre to exact zeros.
    shifted = x.data - x.data[..., :1]
    centered = shifted - shifted.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gxhat = g * gain.data
            gx = inv_std * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return Tensor._result(out, (x, gain, bias), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects logits [b, c] and labels [b]; got {logits.shape}, {labels.shape}")
    b, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise OutOfRangeError(f"labels must lie in [0, {c}); got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = np.asarray((lse - z[rows, labels]).mean(), dtype=logits.data.dtype)

    def backward(g):
        p = _softmax(logits.data)
        p[rows, labels] -= 1.0
        return (p * (g / b),)

    return Tensor._result(loss, (logits,), backward)


def mse_loss(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=pred.data.dtype).reshape(pred.shape)
    diff = pred.data - target
    loss = np.asarray((diff * diff).mean(), dtype=pred.data.dtype)

    def backward(g):
        return (g * 2.0 * diff / diff.size,)

    return Tensor._result(loss, (pred,), backward)


@dataclass
class GradCheckReport:
    """Per-tensor relative error of analytic gradients against central differences.

    The relative error of a tensor is ``max|analytic - numeric|`` divided by the
    larger of the two gradients' max magnitudes. That denominator is floored at
    ``floor`` times the largest gradient magnitude over all checked tensors (and
    at ``1e-12``), so a tensor whose true gradient is identically zero, such as
    an attention key bias, is judged against the overall gradient scale rather
    than against its own rounding noise.
    """

    errors: dict = field(default_factory=dict)
    tol: float = 1e-3

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol


def grad_check(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Iterable[Tensor],
    h: float = 1e-3,
    tol: float = 1e-3,
    fd_dtype=np.float64,
    floor: float = 1e-3,
) -> GradCheckReport:
    """Compare analytic gradients of ``fn()`` with central finite differences.

    The analytic pass runs at the tensors' own dtype. The finite-difference
    pass evaluates ``fn`` with parameters (and any tensors ``fn`` creates) cast
    to ``fd_dtype``; pass ``fd_dtype=None`` to difference at the native dtype.
    """
    if not isinstance(params, Mapping):
        params = {f"param{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.zero_grad()
    fn().backward()
    analytic = {
        name: (np.zeros_like(p.data) if p.grad is None else p.grad.astype(np.float64))
        for name, p in params.items()
    }

    saved = {name: p.data for name, p in params.items()}
    report = GradCheckReport(tol=tol)
    numerics = {}
    ctx = precision(fd_dtype) if fd_dtype is not None else contextlib.nullcontext()
    try:
        with ctx, no_grad():
            for p in params.values():
                p.data = p.data.astype(fd_dtype or p.data.dtype)
            for name, p in params.items():
                numeric = np.zeros(p.shape, dtype=np.float64)
                flat = p.data.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + h
                    f_plus = float(fn().data)
                    flat[i] = orig - h
                    f_minus = float(fn().data)
                    flat[i] = orig
                    numeric.reshape(-1)[i] = (f_plus - f_minus) / (2.0 * h)
                numerics[name] = numeric
    finally:
        for name, p in params.items():
            p.data = saved[name]
    peak = max((max(np.abs(analytic[n]).max(initial=0.0), np.abs(v).max(initial=0.0)) for n, v in numerics.items()), default=0.0)
    for name, numeric in numerics.items():
        a = analytic[name]
        scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor * peak, 1e-12)
        report.errors[name] = float(np.abs(a - numeric).max(initial=0.0) / scale)
    return report
