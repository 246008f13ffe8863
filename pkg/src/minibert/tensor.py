"""Shaped arrays with reverse-mode automatic differentiation.

Storage and elementwise kernels come from numpy; the gradient machinery is
a small tape: every operation that touches a tensor requiring gradients
records a node with a monotonically increasing sequence number, and
``backward`` replays the adjoints of all reachable nodes in reverse record
order. Gradient accumulation order is therefore fixed by tape order, which
keeps results bitwise reproducible.
"""
from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "DegenerateSoftmaxError",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "matmul",
    "softmax",
    "log_softmax",
    "gelu",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "layer_norm",
    "cross_entropy",
    "dropout",
    "concat",
    "stack",
    "backward",
]

_seq_counter = itertools.count()
_state = threading.local()

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class DegenerateSoftmaxError(ValueError):
    """Raised when every entry of a softmax row is -inf."""


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (per thread)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype.kind in "iub":
        arr = arr.astype(np.float32)
    elif arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A numpy array that may participate in the gradient tape.

    ``grad`` is ``None`` until ``backward`` reaches the tensor; it always has
    the same shape as ``data`` once populated.
    """

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data: np.ndarray = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._seq = -1
        self._op = ""

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
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
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        return _add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, -_lift(other, self))

    def __rsub__(self, other):
        return _add(_lift(other, self), -self)

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,), "neg")

    def __mul__(self, other):
        return _mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other, self)
        if other.requires_grad:
            return _mul(self, other ** -1.0)
        return _mul(self, Tensor(1.0 / other.data))

    def __rtruediv__(self, other):
        return _mul(_lift(other, self), self ** -1.0)

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("tensor exponents are not supported")
        x = self.data
        out = x ** exponent

        def bw(g):
            return (g * exponent * x ** (exponent - 1),)

        return _make(out, (self,), bw, "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(_lift(other, self), self)

    # -- shape ops --------------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape")

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return _make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),), "transpose")

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(axes)

    def __getitem__(self, index) -> "Tensor":
        if isinstance(index, Tensor):
            index = index.data
        shape, dtype = self.shape, self.dtype

        def bw(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, index, g)
            return (full,)

        return _make(self.data[index], (self,), bw, "getitem")

    # -- reductions -------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _make(out, (self,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise sugar ------------------------------------------------
    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _make(data: np.ndarray, parents: tuple, bw: Callable, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype if data.dtype in (np.float32, np.float64) else None)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = bw
        out._seq = next(_seq_counter)
        out._op = op
    return out


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------
def _add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def _mul(a: Tensor, b: Tensor) -> Tensor:
    x, y = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * y, x.shape) if a.requires_grad else None,
            _unbroadcast(g * x, y.shape) if b.requires_grad else None,
        )

    return _make(x * y, (a, b), bw, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    if not isinstance(a, Tensor):
        a = Tensor(a)
    if not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape) if b.requires_grad else None
        return ga, gb

    return _make(x @ y, (a, b), bw, "matmul")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    d = x.data
    return _make(np.log(d), (x,), lambda g: (g / d,), "log")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with Phi the standard normal CDF."""
    d = x.data
    cdf = 0.5 * (1.0 + erf(d * _SQRT_HALF))
    out = d * cdf

    def bw(g):
        pdf = np.exp(-0.5 * d * d) * _INV_SQRT_2PI
        return (g * (cdf + d * pdf),)

    return _make(out.astype(d.dtype, copy=False), (x,), bw, "gelu")


def _check_rows(d: np.ndarray, axis: int) -> None:
    if np.isneginf(d).all(axis=axis).any():
        raise DegenerateSoftmaxError("softmax row has no finite entry (all positions masked)")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax; ``-inf`` entries map to exactly 0."""
    d = x.data
    _check_rows(d, axis)
    shifted = d - d.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    _check_rows(d, axis)
    shifted = d - d.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    centered = d - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(d.ndim - 1))

    def bw(g):
        gx = ggain = gbias = None
        if gain.requires_grad:
            ggain = (g * xhat).sum(axis=lead)
        if bias.requires_grad:
            gbias = g.sum(axis=lead)
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), bw, "layer_norm")


def cross_entropy(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    """Mean negative log-likelihood over rows whose target is not ignored."""
    d = logits.data
    if d.ndim != 2:
        raise ValueError(f"cross_entropy expects [n, V] logits, got {d.shape}")
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != d.shape[0]:
        raise ValueError(f"{t.shape[0]} targets for {d.shape[0]} logit rows")
    keep = t != ignore_index
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross_entropy: every row is ignored, mean is undefined")
    rows = np.nonzero(keep)[0]
    tk = t[keep]
    if tk.min() < 0 or tk.max() >= d.shape[1]:
        raise ValueError(f"target out of range [0, {d.shape[1]})")
    sub = d[rows]
    shifted = sub - sub.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -logp[np.arange(count), tk].sum() / count

    def bw(g):
        p = np.exp(logp)
        p[np.arange(count), tk] -= 1.0
        full = np.zeros_like(d)
        full[rows] = p * (g / count)
        return (full,)

    return _make(np.asarray(loss, dtype=d.dtype), (logits,), bw, "cross_entropy")


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout. Identity when not training or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = rng.random(x.shape) >= p
    scale = np.where(keep, 1.0 / (1.0 - p), 0.0).astype(x.dtype)
    return _make(x.data * scale, (x,), lambda g: (g * scale,), "dropout")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    n = len(tensors)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw, "stack")


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------
class Tape:
    """Ordered record of the operations that produced ``output``.

    Nodes are kept in record order (ascending sequence number); ``replay``
    walks them in reverse and accumulates adjoints into every reachable
    tensor that requires gradients.
    """

    def __init__(self, nodes: list, leaves: list, output: Tensor):
        self.nodes = nodes
        self.leaves = leaves
        self.output = output

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        seen: set = set()
        nodes, leaves = [], []
        stack_ = [output]
        while stack_:
            t = stack_.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            if t.is_leaf:
                leaves.append(t)
            else:
                nodes.append(t)
                stack_.extend(t._parents)
        nodes.sort(key=lambda n: n._seq)
        return cls(nodes, leaves, output)

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, seed: np.ndarray) -> None:
        pending = {id(self.output): seed}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg
        for leaf in self.leaves:
            g = pending.pop(id(leaf), None)
            if g is None:
                continue
            g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` for everything ``loss`` depends on."""
    if loss.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any tensor requiring gradients")
    Tape.from_output(loss).replay(np.ones((), dtype=loss.dtype))


Tensor.backward = backward  # type: ignore[attr-defined]


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)
