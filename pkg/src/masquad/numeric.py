"""Dense float64 tensors with tape-based reverse-mode differentiation.

Sized for a small transformer: 2-D matmuls, row-wise masked softmax and layer
norm, a handful of elementwise ops, integer gathers. All math runs on numpy
float64 arrays; the tape records one backward closure per op. Any NaN/Inf
produced by an op raises immediately instead of propagating.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class ShapeError(ValueError):
    """Operand shapes incompatible with the op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class MaskError(ValueError):
    """A softmax row has no allowed entry."""


_seq_counter = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def _check_finite(arr: np.ndarray, op: str) -> None:
    # single-pass probe; detailed scan only on failure
    if arr.size and not np.isfinite(arr.sum()):
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """A float64 array plus an optional backward closure on the tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._seq = next(_seq_counter)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    # operator sugar used throughout the model code
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        """Reverse pass from a scalar; visits nodes in reverse construction order."""
        if self.data.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {self.data.shape}")
        nodes = []
        seen = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda n: n._seq, reverse=True)
        self.grad = np.ones((), dtype=np.float64)
        for node in nodes:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, rng: np.random.Generator | None = None, scale: float | None = None) -> Tensor:
    """A trainable leaf. With rng/scale draws gaussian init of the given shape."""
    if rng is not None:
        data = rng.normal(0.0, scale if scale is not None else 0.02, size=data)
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _make(data: np.ndarray, op: str, parents, backward) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_seq_counter)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accum(node: Tensor, g: np.ndarray) -> None:
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        node.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, "add", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, "mul", (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(out_data, "matmul", (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects 2-D, got {a.data.shape}")
    out_data = np.ascontiguousarray(a.data.T)

    def backward(g):
        if a.requires_grad:
            _accum(a, g.T)

    return _make(out_data, "transpose", (a,), backward)


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"axes {axes} not a permutation for shape {a.data.shape}")
    inverse = np.argsort(axes)
    out_data = np.ascontiguousarray(a.data.transpose(axes))

    def backward(g):
        if a.requires_grad:
            _accum(a, g.transpose(inverse))

    return _make(out_data, "permute", (a,), backward)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over matching leading dimensions (no broadcasting)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if (a.data.ndim != b.data.ndim or a.data.ndim < 3
            or a.data.shape[:-2] != b.data.shape[:-2]
            or a.data.shape[-1] != b.data.shape[-2]):
        raise ShapeError(f"bmm shapes incompatible: {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data.swapaxes(-1, -2))
        if b.requires_grad:
            _accum(b, a.data.swapaxes(-1, -2) @ g)

    return _make(out_data, "bmm", (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            _accum(a, g.reshape(a.data.shape))

    return _make(out_data, "reshape", (a,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    widths = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + widths)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(t, g[tuple(idx)])

    return _make(out_data, "concat", tensors, backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice the last axis; used to split attention heads."""
    out_data = a.data[..., start:stop]

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            ga[..., start:stop] = g
            _accum(a, ga)

    return _make(np.ascontiguousarray(out_data), "slice_cols", (a,), backward)


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather along axis 0 with an integer index array (embedding lookup)."""
    idx = np.asarray(idx, dtype=np.intp)
    out_data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            _accum(a, ga)

    return _make(out_data, "take_rows", (a,), backward)


def masked_softmax(scores: Tensor, mask) -> Tensor:
    """Row softmax over allowed entries only; masked entries are exactly 0.

    Stable via max-subtraction over the allowed entries, so the output is
    bit-for-bit invariant to score values at masked positions. A row with no
    allowed entry raises MaskError.
    """
    scores = _as_tensor(scores)
    m = np.asarray(mask, dtype=bool)
    if m.shape != scores.data.shape:
        raise ShapeError(f"mask shape {m.shape} != scores shape {scores.data.shape}")
    if not m.any(axis=-1).all():
        raise MaskError("softmax row with every entry masked")
    neg = np.where(m, scores.data, -np.inf)
    rowmax = neg.max(axis=-1, keepdims=True)
    shifted = np.where(m, scores.data - rowmax, 0.0)
    e = np.exp(shifted) * m
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if scores.requires_grad:
            dot = (g * out_data).sum(axis=-1, keepdims=True)
            _accum(scores, out_data * (g - dot))

    return _make(out_data, "masked_softmax", (scores,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance over the last axis (population variance), then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out_data = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            term = dxhat - dxhat.mean(axis=-1, keepdims=True) \
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv_std * term)

    return _make(out_data, "layer_norm", (x, gain, bias), backward)


def gelu(x: Tensor) -> Tensor:
    """Tanh-form GELU (the usual transformer approximation)."""
    x = _as_tensor(x)
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * (xd + _GELU_A * (x2 * xd)))
    out_data = 0.5 * xd * (1.0 + t)

    def backward(g):
        if x.requires_grad:
            du = _GELU_C * (1.0 + (3.0 * _GELU_A) * x2)
            dydx = 0.5 * (1.0 + t) + (0.5 * xd) * ((1.0 - t * t) * du)
            _accum(x, g * dydx)

    return _make(out_data, "gelu", (x,), backward)


def mean(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size
    out_data = np.asarray(x.data.mean())

    def backward(g):
        if x.requires_grad:
            _accum(x, np.full(x.data.shape, float(g) / n))

    return _make(out_data, "mean", (x,), backward)


def tsum(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out_data = np.asarray(x.data.sum())

    def backward(g):
        if x.requires_grad:
            _accum(x, np.full(x.data.shape, float(g)))

    return _make(out_data, "sum", (x,), backward)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-row cross-entropy from logits; targets are class indices, shape [n]."""
    logits = _as_tensor(logits)
    t = np.asarray(targets, dtype=np.intp)
    if logits.data.ndim != 2 or t.shape != (logits.data.shape[0],):
        raise ShapeError(f"cross_entropy expects [n, k] logits and [n] targets, "
                         f"got {logits.data.shape} and {t.shape}")
    z = logits.data
    rowmax = z.max(axis=-1, keepdims=True)
    shifted = z - rowmax
    lse = np.log(np.exp(shifted).sum(axis=-1)) + rowmax[:, 0]
    rows = np.arange(z.shape[0])
    out_data = lse - z[rows, t]

    def backward(g):
        if logits.requires_grad:
            p = np.exp(shifted)
            p /= p.sum(axis=-1, keepdims=True)
            p[rows, t] -= 1.0
            _accum(logits, p * g[:, None])

    return _make(out_data, "cross_entropy", (logits,), backward)
