"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is a dynamic tape: every operation that touches a tensor
requiring gradients appends a TapeRecord holding the parent tensors and a
closure that maps the upstream gradient to per-parent gradients.  backward()
topologically orders the records reachable from the loss and replays them
exactly once.  numpy supplies the dense kernels; every gradient rule here is
written by hand and checked against central finite differences in the tests.

Conventions:
  - float64 everywhere, row-major (numpy default)
  - only leaf tensors (node is None, requires_grad=True) receive .grad
  - a second backward over the same root raises TapeConsumed
  - a second gradient write to a leaf raises GradAlreadyPresent unless
    backward(..., accumulate=True) was requested (GradCache needs this)
"""

from __future__ import annotations

import contextlib
import math
import threading

import numpy as np
from scipy.special import erf

from .errors import (
    DetachedTape,
    GradAlreadyPresent,
    NonFinite,
    NotScalar,
    ShapeMismatch,
    TapeConsumed,
    ZeroNorm,
)

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# -- tape bookkeeping --------------------------------------------------------

_state = threading.local()

# live/peak counts of tape records, used to assert GradCache keeps at most
# one sub-batch's graph alive at a time
_live_records = 0
_peak_live_records = 0


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def record_stats() -> tuple[int, int]:
    """(currently alive tape records, peak since last reset)."""
    return _live_records, _peak_live_records


def reset_record_peak() -> None:
    global _peak_live_records
    _peak_live_records = _live_records


class TapeRecord:
    """One differentiation record: parents plus a local gradient rule.

    grad_fn(upstream ndarray) -> tuple of per-parent ndarrays (None for
    parents that need no gradient).
    """

    __slots__ = ("parents", "grad_fn", "consumed", "__weakref__")

    def __init__(self, parents, grad_fn):
        global _live_records, _peak_live_records
        self.parents = parents
        self.grad_fn = grad_fn
        self.consumed = False
        _live_records += 1
        if _live_records > _peak_live_records:
            _peak_live_records = _live_records

    def __del__(self):
        global _live_records
        _live_records -= 1


class Tensor:
    """float64 n-d array, optionally tracked by the differentiation tape."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    # -- introspection --

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- operators --

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def assert_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"non-finite values in {where}")
    return arr


# -- graph construction ------------------------------------------------------

def _make(data: np.ndarray, parents: tuple, grad_fn) -> Tensor:
    """Wrap a freshly computed array, recording a tape node when needed."""
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = TapeRecord(parents, grad_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, s) in enumerate(zip(g.shape, shape)):
        if s == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(out: Tensor, seed=None, accumulate: bool = False) -> None:
    """Populate .grad on every requires_grad leaf reachable from `out`.

    seed: upstream gradient for non-scalar roots (GradCache phase 3 seeds
    pooled embeddings with cached rows).  Without a seed the root must be
    scalar.  accumulate=True sums into existing leaf grads instead of
    raising GradAlreadyPresent.
    """
    root = out.node
    if root is None:
        raise DetachedTape("tensor has no recorded history to differentiate")
    if root.consumed:
        raise TapeConsumed("backward already ran over this graph")
    if seed is None:
        if out.data.size != 1:
            raise NotScalar(f"backward on non-scalar shape {out.data.shape} needs a seed")
        seed = np.ones_like(out.data)
    else:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != out.data.shape:
            raise ShapeMismatch(f"seed shape {seed.shape} != output shape {out.data.shape}")
    root.consumed = True

    # children-after-parents order over reachable records
    order: list[TapeRecord] = []
    visited: set[int] = set()
    stack: list[tuple[TapeRecord, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.node is not None and id(p.node) not in visited:
                stack.append((p.node, False))

    grads: dict[int, np.ndarray] = {id(root): seed}
    leaf_grads: dict[int, tuple[Tensor, np.ndarray]] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if pg is None:
                continue
            if parent.node is not None:
                key = id(parent.node)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            elif parent.requires_grad:
                key = id(parent)
                if key in leaf_grads:
                    leaf_grads[key] = (parent, leaf_grads[key][1] + pg)
                else:
                    leaf_grads[key] = (parent, pg)

    for leaf, g in leaf_grads.values():
        g = _unbroadcast(g, leaf.data.shape)
        if leaf.grad is None:
            leaf.grad = g
        elif accumulate:
            leaf.grad = leaf.grad + g
        else:
            raise GradAlreadyPresent(
                "leaf already holds a gradient; zero it or pass accumulate=True"
            )


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


# -- elementwise and structural ops -------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeMismatch(f"add {a.data.shape} + {b.data.shape}") from e
    ash, bsh = a.data.shape, b.data.shape
    return _make(data, (a, b), lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as e:
        raise ShapeMismatch(f"sub {a.data.shape} - {b.data.shape}") from e
    ash, bsh = a.data.shape, b.data.shape
    return _make(data, (a, b), lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeMismatch(f"mul {a.data.shape} * {b.data.shape}") from e
    ad, bd = a.data, b.data
    ash, bsh = ad.shape, bd.shape
    return _make(
        data, (a, b),
        lambda g: (_unbroadcast(g * bd, ash), _unbroadcast(g * ad, bsh)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        with np.errstate(divide="ignore", invalid="ignore"):
            data = a.data / b.data
    except ValueError as e:
        raise ShapeMismatch(f"div {a.data.shape} / {b.data.shape}") from e
    assert_finite(data, "div")
    ad, bd = a.data, b.data
    ash, bsh = ad.shape, bd.shape
    return _make(
        data, (a, b),
        lambda g: (_unbroadcast(g / bd, ash), _unbroadcast(-g * ad / (bd * bd), bsh)),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch(f"matmul expects 2-d operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul inner dims {a.data.shape} @ {b.data.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatch(f"transpose expects 2-d, got {a.data.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeMismatch(f"reshape {old} -> {shape}") from e
    return _make(data, (a,), lambda g: (g.reshape(old),))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    ash = a.data.shape
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, ash).copy() if np.ndim(g) == 0 or g.size == 1
                    else np.full(ash, float(g)),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, ash).copy(),)

    return _make(data, (a,), grad_fn)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def texp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    assert_finite(data, "exp")
    return _make(data, (a,), lambda g: (g * data,))


def tlog(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    assert_finite(data, "log")
    ad = a.data
    return _make(data, (a,), lambda g: (g / ad,))


def tsqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        data = np.sqrt(a.data)
    assert_finite(data, "sqrt")
    return _make(data, (a,), lambda g: (g * 0.5 / data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)
    return _make(data, (a,), lambda g: (g * (1.0 - data * data),))


def gelu(a) -> Tensor:
    """Exact GELU: 0.5 x (1 + erf(x/sqrt(2)))."""
    a = as_tensor(a)
    ad = a.data
    phi = 0.5 * (1.0 + erf(ad / _SQRT2))
    data = ad * phi

    def grad_fn(g):
        pdf = np.exp(-0.5 * ad * ad) * _INV_SQRT_2PI
        return (g * (phi + ad * pdf),)

    return _make(data, (a,), grad_fn)


def narrow(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along axis 0 or 1 of a 2-d tensor."""
    a = as_tensor(a)
    if a.data.ndim != 2 or axis not in (0, 1):
        raise ShapeMismatch(f"narrow expects 2-d and axis 0/1, got {a.data.shape}, axis {axis}")
    n = a.data.shape[axis]
    if not (0 <= start < stop <= n):
        raise ShapeMismatch(f"narrow range [{start}:{stop}] outside axis of length {n}")
    data = (a.data[start:stop] if axis == 0 else a.data[:, start:stop]).copy()
    ash = a.data.shape

    def grad_fn(g):
        full = np.zeros(ash)
        if axis == 0:
            full[start:stop] = g
        else:
            full[:, start:stop] = g
        return (full,)

    return _make(data, (a,), grad_fn)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeMismatch("concat of zero tensors")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeMismatch(f"concat axis {axis}: {[t.data.shape for t in tensors]}") from e
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        sl = [slice(None)] * g.ndim
        outs = []
        for i in range(len(sizes)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(sl)].copy())
        return tuple(outs)

    return _make(data, tuple(tensors), grad_fn)


def gather_rows(table, ids) -> Tensor:
    """Row lookup (embedding): table (V, d), ids int vector (L,) -> (L, d)."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2 or ids.ndim != 1:
        raise ShapeMismatch(f"gather_rows table {table.data.shape}, ids {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeMismatch("gather_rows index out of range")
    tsh = table.data.shape

    def grad_fn(g):
        full = np.zeros(tsh)
        np.add.at(full, ids, g)
        return (full,)

    return _make(table.data[ids].copy(), (table,), grad_fn)


# -- fused numerical kernels ---------------------------------------------------

def softmax_rows(a) -> Tensor:
    """Stable softmax along the last axis (max-shifted)."""
    a = as_tensor(a)
    assert_finite(a.data, "softmax input")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return ((g - (g * s).sum(axis=-1, keepdims=True)) * s,)

    return _make(s, (a,), grad_fn)


def log_softmax_rows(a) -> Tensor:
    """Stable log-softmax along the last axis."""
    a = as_tensor(a)
    assert_finite(a.data, "log_softmax input")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def grad_fn(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), grad_fn)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.data.shape != x.data.shape[-1:] or beta.data.shape != x.data.shape[-1:]:
        raise ShapeMismatch(
            f"layer_norm scale/shift {gamma.data.shape}/{beta.data.shape} vs input {x.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gamma.data + beta.data
    gd = gamma.data

    def grad_fn(g):
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        return (dx, dgamma, dbeta)

    return _make(data, (x, gamma, beta), grad_fn)


# -- public vector kernels -----------------------------------------------------

def stable_softmax(logits):
    """Probability vector via max-shifted softmax.

    Accepts a Tensor (differentiable) or array-like (plain ndarray out).
    """
    if isinstance(logits, Tensor):
        if logits.data.ndim != 1 or logits.data.size < 1:
            raise ShapeMismatch(f"stable_softmax expects a vector, got {logits.data.shape}")
        return softmax_rows(logits)
    arr = np.asarray(logits, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 1:
        raise ShapeMismatch(f"stable_softmax expects a vector, got {arr.shape}")
    assert_finite(arr, "softmax input")
    e = np.exp(arr - arr.max())
    return e / e.sum()


def cosine_similarity(a, b) -> Tensor:
    """dot(a,b) / (|a| |b|) for vectors; differentiable w.r.t. both."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ShapeMismatch(f"cosine_similarity shapes {a.data.shape} vs {b.data.shape}")
    if a.data.size < 1:
        raise ShapeMismatch("cosine_similarity on empty vectors")
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na < 1e-12 or nb < 1e-12:
        raise ZeroNorm(f"cosine_similarity norms ({na:.3e}, {nb:.3e})")
    num = tsum(mul(a, b))
    den = mul(tsqrt(tsum(mul(a, a))), tsqrt(tsum(mul(b, b))))
    return div(num, den)
