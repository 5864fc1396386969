"""Reverse-mode autodiff over numpy arrays.

Design constraints that shaped this module:
  * double precision by default (single precision behind set_default_dtype),
  * a tape with a fixed accumulation order: nodes are numbered at creation
    and backward() visits them in strictly decreasing order, so gradient
    sums are bitwise reproducible,
  * kernels are pure; the only mutation is gradient accumulation into .grad.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from . import fused
from .errors import ConfigError, NumericError, ShapeError

_DTYPE = np.float64
_GRAD_ENABLED = True
_IDS = itertools.count()

NORM_EPS = 1e-6
ROPE_BASE = 10000.0


def set_default_dtype(dtype) -> None:
    """Switch the compute precision (np.float64 or np.float32)."""
    global _DTYPE
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DTYPE = dtype


def default_dtype():
    return _DTYPE


@contextmanager
def no_grad():
    """Disable taping inside the block (forward-only evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A numpy array plus an optional gradient buffer and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_tid")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], None] | None = None
        self._tid = next(_IDS)

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

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(np.broadcast_to(g, self.data.shape))
        else:
            self.grad += g

    # -- arithmetic sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, pow(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    @property
    def T(self):
        if self.data.ndim != 2:
            raise ShapeError("T is defined for 2-D tensors only")
        return swapaxes(self, 0, 1)

    def backward(self) -> None:
        """Reverse sweep seeded with d(self)/d(self) = 1. Scalar outputs only."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar output")
        nodes: list[Tensor] = []
        seen = set()
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._tid, reverse=True)  # creation order is topological
        self.grad = np.ones_like(self.data)
        for node in nodes:
            if node._vjp is not None and node.grad is not None:
                node._vjp(node.grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._tid = next(_IDS)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- primitive ops ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def vjp(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _node(data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def vjp(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), vjp)


def pow(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    data = a.data**exponent

    def vjp(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1.0))

    return _node(data, (a,), vjp)


def texp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def vjp(g):
        a._accumulate(g * data)

    return _node(data, (a,), vjp)


def tlog(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def vjp(g):
        a._accumulate(g / a.data)

    return _node(data, (a,), vjp)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # stable in both tails: exp of a nonpositive argument only
    e = np.exp(-np.abs(a.data))
    data = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def vjp(g):
        a._accumulate(g * data * (1.0 - data))

    return _node(data, (a,), vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data @ b.data
    except ValueError as e:
        raise ShapeError(f"matmul {a.data.shape} @ {b.data.shape}: {e}") from None

    def vjp(g):
        if a.requires_grad:
            ga = g @ b.data.swapaxes(-1, -2)
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = a.data.swapaxes(-1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _node(data, (a, b), vjp)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _node(np.asarray(data), (a,), vjp)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def vjp(g):
        a._accumulate(g.reshape(a.data.shape))

    return _node(data, (a,), vjp)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    data = a.data.swapaxes(ax1, ax2)

    def vjp(g):
        a._accumulate(g.swapaxes(ax1, ax2))

    return _node(data, (a,), vjp)


def take_rows(table, idx) -> Tensor:
    """table[(idx)] for a 2-D table and integer idx of any shape (embedding lookup)."""
    table = as_tensor(table)
    idx = np.asarray(idx)
    data = table.data[idx]

    def vjp(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx, g)

    return _node(data, (table,), vjp)


def gather_pairs(a, rows, cols) -> Tensor:
    """a[rows, cols] for a 2-D tensor; rows/cols are equal-length index arrays."""
    a = as_tensor(a)
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    data = a.data[rows, cols]

    def vjp(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, (rows, cols), g)

    return _node(data, (a,), vjp)


def index_add(base, rows, values) -> Tensor:
    """base with values scatter-added at the given row indices."""
    base, values = as_tensor(base), as_tensor(values)
    rows = np.asarray(rows)
    data = base.data.copy()
    np.add.at(data, rows, values.data)

    def vjp(g):
        if base.requires_grad:
            base._accumulate(g)
        if values.requires_grad:
            values._accumulate(g[rows])

    return _node(data, (base, values), vjp)


def tslice(a, key) -> Tensor:
    """Basic indexing (ints/slices) as a tape op."""
    a = as_tensor(a)
    data = a.data[key]

    def vjp(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[key] += g

    return _node(np.asarray(data), (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _node(data, tensors, vjp)


# -- composite kernels ---------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax; rejects non-finite inputs."""
    a = as_tensor(a)
    if not np.isfinite(a.data).all():
        raise NumericError("softmax: non-finite input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (data * g).sum(axis=axis, keepdims=True)
        a._accumulate(data * (g - dot))

    return _node(data, (a,), vjp)


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    data = (np.log(s) + m).squeeze(axis)
    soft = e / s

    def vjp(g):
        a._accumulate(np.expand_dims(g, axis) * soft)

    return _node(data, (a,), vjp)


def rms_norm(x, gain) -> Tensor:
    """Scale-only normalization: x / sqrt(mean(x^2) + eps) * gain.

    No mean subtraction and no bias, so the per-block parameter cost is
    exactly the width of the gain vector.
    """
    x, gain = as_tensor(x), as_tensor(gain)
    if x.data.shape[-1] != gain.data.shape[-1]:
        raise ShapeError(f"rms_norm: x width {x.data.shape[-1]} != gain width {gain.data.shape[-1]}")
    n = x.data.shape[-1]
    ms = (x.data * x.data).mean(axis=-1, keepdims=True) + NORM_EPS
    inv = ms**-0.5
    normed = x.data * inv
    data = normed * gain.data

    def vjp(g):
        if gain.requires_grad:
            gain._accumulate((g * normed).reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gi = g * gain.data
            dot = (x.data * gi).sum(axis=-1, keepdims=True)
            x._accumulate(inv * (gi - x.data * (dot * inv * inv / n)))

    return _node(data, (x, gain), vjp)


def swiglu(gate, up) -> Tensor:
    """Elementwise silu(gate) * up, where silu(z) = z * sigmoid(z)."""
    gate, up = as_tensor(gate), as_tensor(up)
    if gate.data.shape != up.data.shape:
        raise ShapeError(f"swiglu: gate {gate.data.shape} != up {up.data.shape}")
    return mul(mul(gate, sigmoid(gate)), up)


def _rope_angles(n_pos: int, head_dim: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    if head_dim % 2:
        raise ConfigError(f"rope: head dim {head_dim} must be even")
    half = head_dim // 2
    freqs = ROPE_BASE ** (-np.arange(half, dtype=dtype) * 2.0 / head_dim)
    theta = np.arange(n_pos, dtype=dtype)[:, None] * freqs[None, :]
    return np.cos(theta), np.sin(theta)


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rope_rotate(x, positions=None) -> Tensor:
    """Rotary position encoding over the last axis, pairwise (2i, 2i+1), base 10000.

    x: (..., T, head_dim); positions defaults to 0..T-1. Norm-preserving.
    """
    x = as_tensor(x)
    t_axis = x.data.shape[-2]
    head_dim = x.data.shape[-1]
    if positions is None:
        positions = np.arange(t_axis)
    positions = np.asarray(positions)
    cos_all, sin_all = _rope_angles(int(positions.max()) + 1, head_dim, x.data.dtype)
    cos = cos_all[positions]
    sin = sin_all[positions]
    data = _rotate(x.data, cos, sin)

    def vjp(g):
        # inverse rotation (rotations are orthogonal)
        x._accumulate(_rotate(g, cos, -sin))

    return _node(data, (x,), vjp)


def cross_entropy_nll(logits, targets) -> Tensor:
    """Mean next-token NLL: -log softmax(logits)[target], averaged over positions.

    logits: (..., V); targets: integer array of the leading shape (or a single id).
    Gradient wrt logits is (softmax - onehot) / n_positions.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    vocab = logits.data.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"target id out of range for vocab {vocab}")
    if not np.isfinite(logits.data).all():
        raise NumericError("cross_entropy_nll: non-finite logits")
    flat = logits.data.reshape(-1, vocab)
    tflat = targets.reshape(-1)
    if flat.shape[0] != tflat.shape[0]:
        raise ShapeError(f"cross_entropy_nll: {logits.data.shape} logits vs {targets.shape} targets")
    m = flat.max(axis=-1, keepdims=True)
    e = np.exp(flat - m)
    z = e.sum(axis=-1, keepdims=True)
    probs = e / z
    n = flat.shape[0]
    nll = (np.log(z).squeeze(-1) + m.squeeze(-1) - flat[np.arange(n), tflat]).mean()

    def vjp(g):
        gl = probs.copy()
        gl[np.arange(n), tflat] -= 1.0
        gl *= float(g) / n
        logits._accumulate(gl.reshape(logits.data.shape))

    return _node(np.asarray(nll), (logits,), vjp)


def causal_attention(q, k, v) -> Tensor:
    """Fused multi-head causal attention; q, k, v are (B, H, T, head_dim)."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if not (q.data.shape == k.data.shape == v.data.shape) or q.data.ndim != 4:
        raise ShapeError(f"causal_attention: q {q.data.shape}, k {k.data.shape}, v {v.data.shape}")
    # the fused kernels index heavily; strided views from swapaxes are slow there
    qd = np.ascontiguousarray(q.data)
    kd = np.ascontiguousarray(k.data)
    vd = np.ascontiguousarray(v.data)
    out, probs = fused.causal_attention_forward(qd, kd, vd)
    if not np.isfinite(out).all():
        raise NumericError("causal_attention: non-finite output")

    def vjp(g):
        gq, gk, gv = fused.causal_attention_backward(
            np.ascontiguousarray(g), qd, kd, vd, probs)
        if q.requires_grad:
            q._accumulate(gq)
        if k.requires_grad:
            k._accumulate(gk)
        if v.requires_grad:
            v._accumulate(gv)

    return _node(out, (q, k, v), vjp)


# -- verification harness --------------------------------------------------------


def grad_check(f: Callable[..., Tensor], inputs: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    Per coordinate: |analytic - (f(x+eps) - f(x-eps)) / 2eps| / max(1, |analytic|).
    """
    inputs = list(inputs)
    for t in inputs:
        t.zero_grad()
    out = f(*inputs)
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    worst = 0.0
    with no_grad():
        for t, ga in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(*inputs).item()
                flat[i] = orig - eps
                fm = f(*inputs).item()
                flat[i] = orig
                fd = (fp - fm) / (2.0 * eps)
                err = abs(gflat[i] - fd) / max(1.0, abs(gflat[i]))
                if err > worst:
                    worst = err
    return worst
