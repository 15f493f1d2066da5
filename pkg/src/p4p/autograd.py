"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every differentiable computation in the package is expressed through the
:class:`Tensor` wrapper defined here. The engine is deliberately small:
a handful of primitives with hand-written vector-Jacobian products, plus
composed helpers (softmax, layer norm) whose gradients follow from the
primitives. Gradient correctness is established by the central
finite-difference suites in the tests, not taken on faith.

Conventions:
  - dtype is preserved end to end (float32 runtime, float64 for checks);
  - reductions with ties (max) route the gradient to the first maximal
    element along the axis, matching ``np.argmax``;
  - graph construction is skipped entirely when no input requires grad,
    so evaluation-mode forwards cost no bookkeeping.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "param", "const", "backward", "add", "mul", "matmul", "concat",
    "softmax", "log_softmax", "layer_norm", "gelu", "relu", "dropout", "take",
    "take_pairs", "expand",
]

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return mul(self, power(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return amax(self, axis=axis, keepdims=keepdims)

    def expand(self, shape):
        return expand(self, shape)


def param(data, dtype=None) -> Tensor:
    """A trainable leaf tensor."""
    arr = np.array(data, dtype=dtype, copy=True)
    return Tensor(arr, requires_grad=True)


def const(data, dtype=None) -> Tensor:
    """A non-trainable tensor (inputs, masks, precomputed geometry)."""
    return Tensor(np.asarray(data, dtype=dtype))


def _ensure(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(data, parents, vjp) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), vjp)


def power(a, exponent: float) -> Tensor:
    a = _ensure(a)
    out = a.data ** exponent

    def vjp(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _make(out, (a,), vjp)


def matmul(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _make(out, (a, b), vjp)


def exp(a) -> Tensor:
    a = _ensure(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _make(out, (a,), vjp)


def log(a) -> Tensor:
    a = _ensure(a)
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _make(out, (a,), vjp)


def sqrt(a) -> Tensor:
    a = _ensure(a)
    out = np.sqrt(a.data)

    def vjp(g):
        return (g * (0.5 / out),)

    return _make(out, (a,), vjp)


def tanh(a) -> Tensor:
    a = _ensure(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), vjp)


def gelu(a) -> Tensor:
    """Exact Gaussian-error-linear unit: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    a = _ensure(a)
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * phi

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (phi + x * pdf),)

    return _make(out, (a,), vjp)


def relu(a) -> Tensor:
    a = _ensure(a)
    out = np.maximum(a.data, 0.0)

    def vjp(g):
        return (g * (a.data > 0.0),)

    return _make(out, (a,), vjp)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _ensure(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(out, (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _ensure(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def amax(a, axis=None, keepdims=False) -> Tensor:
    """Max reduction; ties route the gradient to the first maximum."""
    a = _ensure(a)
    if axis is None:
        out = a.data.max()

        def vjp(g):
            mask = np.zeros(a.data.shape, dtype=a.data.dtype)
            mask.flat[np.argmax(a.data)] = 1.0
            return (mask * g,)

        return _make(out, (a,), vjp)

    out = a.data.max(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axis)
        idx = np.argmax(a.data, axis=axis)
        mask = np.zeros(a.data.shape, dtype=a.data.dtype)
        np.put_along_axis(mask, np.expand_dims(idx, axis), 1.0, axis=axis)
        return (mask * g,)

    return _make(out, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = _ensure(a)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _make(out, (a,), vjp)


def cast(a, dtype) -> Tensor:
    a = _ensure(a)
    out = a.data.astype(dtype)

    def vjp(g):
        return (g.astype(a.data.dtype),)

    return _make(out, (a,), vjp)


def swapaxes(a, ax1, ax2) -> Tensor:
    a = _ensure(a)
    out = np.swapaxes(a.data, ax1, ax2)

    def vjp(g):
        return (np.swapaxes(g, ax1, ax2),)

    return _make(out, (a,), vjp)


def getitem(a, key) -> Tensor:
    # Basic indexing only (slices / ints); fancy keys would need add.at.
    a = _ensure(a)
    out = a.data[key]

    def vjp(g):
        full = np.zeros(a.data.shape, dtype=a.data.dtype)
        full[key] = g
        return (full,)

    return _make(out, (a,), vjp)


def concat(tensors, axis=-1) -> Tensor:
    tensors = [_ensure(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), vjp)


def expand(a, shape) -> Tensor:
    """Broadcast to ``shape`` without copying; gradient sums the replicas."""
    a = _ensure(a)
    out = np.broadcast_to(a.data, shape)

    def vjp(g):
        return (_unbroadcast(g, a.data.shape),)

    return _make(out, (a,), vjp)


def take(a, idx) -> Tensor:
    """Gather rows of ``a`` along axis 0 with an arbitrary integer index array."""
    a = _ensure(a)
    idx = np.asarray(idx)
    out = a.data[idx]

    def vjp(g):
        full = np.zeros(a.data.shape, dtype=a.data.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), vjp)


def take_pairs(a, idx) -> Tensor:
    """Batched row gather: out[b, ...] = a[b, idx[b, ...], ...].

    ``a`` has shape (B, N, ...), ``idx`` integer shape (B, *I); the result
    has shape (B, *I, ...).
    """
    a = _ensure(a)
    idx = np.asarray(idx)
    batch = np.arange(idx.shape[0]).reshape((-1,) + (1,) * (idx.ndim - 1))
    out = a.data[batch, idx]

    def vjp(g):
        full = np.zeros(a.data.shape, dtype=a.data.dtype)
        np.add.at(full, (batch, idx), g)
        return (full,)

    return _make(out, (a, ), vjp)


# ---------------------------------------------------------------------------
# composed helpers
# ---------------------------------------------------------------------------

def softmax(a, axis=-1) -> Tensor:
    shifted = a - amax(a, axis=axis, keepdims=True)
    e = exp(shifted)
    return e * power(sum_(e, axis=axis, keepdims=True), -1.0)


def log_softmax(a, axis=-1) -> Tensor:
    shifted = a - amax(a, axis=axis, keepdims=True)
    return shifted - log(sum_(exp(shifted), axis=axis, keepdims=True))


def layer_norm(a, weight, bias, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = mean(a, axis=-1, keepdims=True)
    centered = a - mu
    var = mean(centered * centered, axis=-1, keepdims=True)
    inv = power(var + eps, -0.5)
    return centered * inv * weight + bias


def dropout(a, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; call only on the training path."""
    if rate <= 0.0:
        return a
    keep = 1.0 - rate
    mask = (rng.random(a.data.shape) < keep).astype(a.data.dtype) / keep
    return mul(a, Tensor(mask))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(root: Tensor, seed=None) -> None:
    """Accumulate gradients of ``root`` into every reachable leaf's ``.grad``.

    ``root`` is typically a scalar loss; ``seed`` overrides the initial
    gradient (defaults to ones).
    """
    if not root.requires_grad:
        raise ValueError("root tensor does not require grad")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    if seed is None:
        seed = np.ones_like(root.data)
    root.grad = np.asarray(seed, dtype=root.data.dtype)

    for node in reversed(topo):
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.asarray(g, dtype=parent.data.dtype)
            else:
                parent.grad = parent.grad + g
