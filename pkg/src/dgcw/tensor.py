"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays (row-major, float32 or float64). Operations record
their inputs and a backward rule on the output; ``Tensor.backward`` replays
the rules exactly once each, in reverse execution order, accumulating into
``.grad``. Tensors are treated as immutable once produced. Reductions go
through numpy's pairwise summation, whose evaluation tree depends only on
the shape, so repeated runs are bit-identical.
"""

from __future__ import annotations

import hashlib
from contextlib import contextmanager
from itertools import zip_longest

import numpy as np

F32 = np.dtype(np.float32)
F64 = np.dtype(np.float64)

_DTYPE_NAMES = {"f32": F32, "f64": F64}


class ShapeError(ValueError):
    """Operand shapes cannot be combined."""


def dtype_from_name(name: str) -> np.dtype:
    try:
        return _DTYPE_NAMES[name]
    except KeyError:
        raise ValueError(f"unknown precision {name!r}, expected f32 or f64") from None


def name_from_dtype(dtype) -> str:
    return "f32" if np.dtype(dtype) == F32 else "f64"


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / numeric probes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (F32, F64):
            arr = arr.astype(F64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None          # np.ndarray, same shape, lazily created
        self._parents = ()
        self._vjp = None

    # -- basic introspection ------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={name_from_dtype(self.dtype)}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(self, other)

    def __truediv__(self, other):
        return divide(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return multiply(self, -1.0)

    def sum(self, axis, keepdims=False):
        return reduce("sum", self, axis, keepdims=keepdims)

    def mean(self, axis, keepdims=False):
        return reduce("mean", self, axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    # -- backward -----------------------------------------------------------

    def backward(self):
        """Accumulate gradients of this scalar into every reachable
        requires_grad tensor. Multiple paths to one tensor sum; repeated
        backward calls keep accumulating until ``zero_grad``."""
        if self.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return

        # Reverse of an iterative post-order DFS is a topological order.
        # Nodes are marked visited when first expanded (not when pushed), so
        # a tensor feeding several consumers lands before all of them.
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        self.grad = _accum(self.grad, np.ones_like(self.data))
        for node in reversed(topo):
            if node._vjp is None or node.grad is None:
                continue
            gs = node._vjp(node.grad)
            for parent, g in zip(node._parents, gs):
                if parent.requires_grad and g is not None:
                    parent.grad = _accum(parent.grad, g)


def _accum(slot, g):
    if slot is None:
        return np.array(g, copy=True)
    slot += g
    return slot


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, vjp) -> Tensor:
    """Wrap a computed array as a graph node. ``vjp(g)`` must return one
    gradient array (or None) per parent, in order."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


# -- broadcasting ------------------------------------------------------------

def broadcast_shape(s1, s2):
    """Trailing-dimension rule: align on the right, an extent of 1 stretches."""
    out = []
    for a, b in zip_longest(reversed(s1), reversed(s2), fillvalue=1):
        if a != b and a != 1 and b != 1:
            raise ShapeError(f"cannot broadcast {tuple(s1)} with {tuple(s2)}")
        out.append(max(a, b))
    return tuple(reversed(out))


def _unbroadcast(g, shape):
    """Sum g down to ``shape`` (inverse of broadcasting)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_same_dtype(a: Tensor, b: Tensor):
    if a.dtype != b.dtype:
        raise TypeError(f"mixed dtypes {a.dtype} / {b.dtype}; cast explicitly")


# -- elementwise ops ----------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _check_same_dtype(a, b)
    broadcast_shape(a.shape, b.shape)
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(data, (a, b), vjp)


def subtract(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _check_same_dtype(a, b)
    broadcast_shape(a.shape, b.shape)
    data = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(data, (a, b), vjp)


def multiply(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _check_same_dtype(a, b)
    broadcast_shape(a.shape, b.shape)
    data = a.data * b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _node(data, (a, b), vjp)


def divide(a: Tensor, b) -> Tensor:
    """Elementwise quotient. Denominators must be nonzero; callers that can
    hit a zero sum add their own epsilon offset first (see the weighting
    module's divide-by-sum guard)."""
    b = _as_tensor(b, a.dtype)
    _check_same_dtype(a, b)
    broadcast_shape(a.shape, b.shape)
    if np.any(b.data == 0):
        raise ZeroDivisionError("division by zero; offset the denominator by an epsilon")
    data = a.data / b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g / bd, a.shape), _unbroadcast(-g * ad / (bd * bd), b.shape)

    return _node(data, (a, b), vjp)


def square(a: Tensor) -> Tensor:
    data = a.data * a.data
    ad = a.data

    def vjp(g):
        return (2.0 * ad * g,)

    return _node(data, (a,), vjp)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)
    mask = a.data > 0

    def vjp(g):
        return (g * mask,)

    return _node(data, (a,), vjp)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - data * data),)

    return _node(data, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def vjp(g):
        return (g * data,)

    return _node(data, (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    """Numerically stable logistic gate (used by the channel-gating baseline)."""
    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * data * (1.0 - data),)

    return _node(data, (a,), vjp)


_UNARY = {"square": square, "relu": relu, "tanh": tanh, "exp": exp}
_BINARY = {"add": add, "subtract": subtract, "multiply": multiply, "divide": divide}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by op kind: add, subtract, multiply, divide, square,
    relu (maximum with zero), tanh, exp."""
    if kind in _BINARY:
        if b is None:
            raise TypeError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        if b is not None:
            raise TypeError(f"{kind} takes one operand")
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# -- matmul -------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Contraction of rank-2 matrices or rank-3 batches with equal batch extent."""
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeError(f"matmul wants two rank-2 or two rank-3 tensors, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    if a.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"batch extents differ: {a.shape} @ {b.shape}")
    _check_same_dtype(a, b)
    data = a.data @ b.data
    ad, bd = a.data, b.data
    sw = (0, 2, 1) if a.ndim == 3 else (1, 0)

    def vjp(g):
        return g @ bd.transpose(sw), ad.transpose(sw) @ g

    return _node(data, (a, b), vjp)


# -- reductions ---------------------------------------------------------------

def reduce(kind: str, a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Reduce one axis: sum, mean, max, or population variance."""
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {a.ndim}")
    axis = axis % a.ndim
    ad = a.data
    n = ad.shape[axis]

    if kind == "sum":
        data = ad.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, ad.shape),)

    elif kind == "mean":
        data = ad.mean(axis=axis, keepdims=keepdims)

        def vjp(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / n, ad.shape),)

    elif kind == "max":
        data = ad.max(axis=axis, keepdims=keepdims)
        idx = np.expand_dims(ad.argmax(axis=axis), axis)  # first max wins ties

        def vjp(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            out = np.zeros_like(ad)
            np.put_along_axis(out, idx, g, axis)
            return (out,)

    elif kind == "variance":
        # mean of squares minus squared mean, accumulated in float64
        wide = ad.astype(F64, copy=False)
        m = wide.mean(axis=axis, keepdims=True)
        data = ((wide * wide).mean(axis=axis, keepdims=keepdims) -
                (m * m if keepdims else np.squeeze(m * m, axis)))
        data = data.astype(ad.dtype)
        centered = (wide - m).astype(ad.dtype)

        def vjp(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (2.0 / n * centered * g,)

    else:
        raise ValueError(f"unknown reduce kind {kind!r}")

    return _node(data, (a,), vjp)


def softmax(a: Tensor, axis: int) -> Tensor:
    """Softmax along ``axis``, computed with max-subtraction for stability."""
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {a.ndim}")
    axis = axis % a.ndim
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _node(data, (a,), vjp)


# -- movement -----------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)
    old = a.shape

    def vjp(g):
        return (g.reshape(old),)

    return _node(data, (a,), vjp)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inv),)

    return _node(data, (a,), vjp)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            g[tuple(slice(None) if d != axis % g.ndim else slice(int(offsets[i]), int(offsets[i + 1]))
                    for d in range(g.ndim))]
            for i in range(len(tensors))
        )

    return _node(data, tuple(tensors), vjp)


# -- gradient checking ----------------------------------------------------------

def gradcheck(f, x: Tensor, step: float = 1e-4, max_elements: int | None = None) -> float:
    """Max relative error between the recorded gradient of ``f(x)`` and
    central finite differences, elementwise. The relative error divides by
    max(|analytic|, |numeric|, 1e-8). Use float64 tensors. ``max_elements``
    caps the probed entries (evenly spaced, deterministic) for large
    tensors; the default probes every element."""
    prev_rg, prev_grad = x.requires_grad, x.grad
    x.requires_grad = True
    x.grad = None
    try:
        y = f(x)
        if y.size != 1:
            raise ValueError("gradcheck needs a scalar-valued function")
        y.backward()
        analytic = (np.zeros_like(x.data) if x.grad is None else x.grad.copy()).reshape(-1)

        flat = x.data.reshape(-1)
        if max_elements is not None and flat.size > max_elements:
            probe = np.unique(np.linspace(0, flat.size - 1, max_elements).astype(int))
        else:
            probe = np.arange(flat.size)
        numeric = np.empty(probe.size, dtype=flat.dtype)
        with no_grad():
            for j, i in enumerate(probe):
                orig = flat[i]
                flat[i] = orig + step
                fp = f(x).item()
                flat[i] = orig - step
                fm = f(x).item()
                flat[i] = orig
                numeric[j] = (fp - fm) / (2.0 * step)

        picked = analytic[probe]
        denom = np.maximum(np.maximum(np.abs(picked), np.abs(numeric)), 1e-8)
        return float(np.max(np.abs(picked - numeric) / denom)) if probe.size else 0.0
    finally:
        x.requires_grad = prev_rg
        x.grad = prev_grad


# -- keyed RNG -------------------------------------------------------------------

def rng_for(seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by (seed, purpose, index); draws are
    independent of the order in which streams are created."""
    digest = hashlib.blake2b(
        f"{seed}|{purpose}|{index}".encode(), digest_size=16
    ).digest()
    key = np.frombuffer(digest, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def zeros(shape, dtype=F64, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=F64, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)
