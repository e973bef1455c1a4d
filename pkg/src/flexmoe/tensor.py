"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape`.  Outside
a tape nothing is recorded, which is how inference and finite-difference
probes run without building a graph::

    with Tape() as tape:
        loss = cross_entropy(x @ w, targets)
        tape.backward(loss)
    w.grad  # d loss / d w
"""

from __future__ import annotations

import math
import threading

import numpy as np

from .errors import NumericError, ShapeError

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations.

    A tape belongs to the thread that entered it.  ``backward`` replays the
    records in reverse order, so every use of an input contributes exactly
    once to its gradient.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def record(self, out, backward_fn):
        self.records.append((out, backward_fn))

    def backward(self, loss: "Tensor"):
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self.records):
            if out.grad is not None:
                fn(out.grad)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        if not np.isfinite(self.data).all():
            raise NumericError("tensor data must be finite")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def grad_or_zeros(self):
        return np.zeros_like(self.data) if self.grad is None else self.grad

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn):
    if not np.isfinite(data).all():
        raise NumericError("operation produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    tape = active_tape()
    out.requires_grad = tape is not None and any(p.requires_grad for p in parents)
    if out.requires_grad:
        tape.record(out, backward_fn)
    return out


def _accumulate(t: Tensor, g):
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = np.broadcast_to(g, t.data.shape)
    # never accumulate in place: ``g`` may alias another node's buffer
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * out_data / b.data, b.shape))

    return _result(out_data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: _accumulate(a, -g))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, g * p * a.data ** (p - 1))

    return _result(a.data**p, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)
    return _result(out_data, (a,), lambda g: _accumulate(a, g * out_data))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")
    return _result(np.log(a.data), (a,), lambda g: _accumulate(a, g / a.data))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)
    return _result(out_data, (a,), lambda g: _accumulate(a, g * (1.0 - out_data**2)))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out_data = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        _accumulate(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner))

    return _result(out_data, (a,), backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------- reductions and shape


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g / count, a.shape))

    return _result(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(a.shape)))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return _result(
        np.transpose(a.data, axes), (a,), lambda g: _accumulate(a, np.transpose(g, inverse))
    )


def take(a, index) -> Tensor:
    """Gather with numpy indexing semantics; repeated indices accumulate."""
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        _accumulate(a, full)

    return _result(np.array(a.data[index]), (a,), backward)


def index_add(shape, pieces) -> Tensor:
    """Sum ``pieces`` into a zero tensor of ``shape``.

    ``pieces`` is a list of ``(index, tensor)``; each index selects rows of
    the output and must not repeat within its own piece.
    """
    out = np.zeros(shape)
    parents = []
    for idx, t in pieces:
        out[idx] += t.data
        parents.append(t)

    def backward(g):
        for idx, t in pieces:
            _accumulate(t, g[idx])

    return _result(out, tuple(parents), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, bounds, axis=axis)):
            _accumulate(t, part)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def stack(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        for i, t in enumerate(tensors):
            _accumulate(t, np.take(g, i, axis=axis))

    return _result(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward)


# ---------------------------------------------------------------- normalisation and probabilities


def _check_finite(a: Tensor):
    if not np.isfinite(a.data).all():
        raise NumericError("non-finite input")


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    _check_finite(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accumulate(a, out_data * (g - (g * out_data).sum(axis=axis, keepdims=True)))

    return _result(out_data, (a,), backward)


def softmax_rows(logits) -> Tensor:
    """Row-wise softmax of an ``(n, m)`` tensor."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D tensor, got {logits.shape}")
    return softmax(logits, axis=1)


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    _check_finite(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out_data = z - lse
    probs = np.exp(out_data)

    def backward(g):
        _accumulate(a, g - probs * g.sum(axis=axis, keepdims=True))

    return _result(out_data, (a,), backward)


def layer_norm(a, gamma=None, beta=None, eps=1e-5) -> Tensor:
    """Normalise over the last axis, then apply optional gain and shift."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + eps)
    xhat = (x - mu) * inv
    out_data = xhat
    if gamma is not None:
        out_data = out_data * gamma.data
    if beta is not None:
        out_data = out_data + beta.data
    parents = tuple(t for t in (a, gamma, beta) if t is not None)

    def backward(g):
        if gamma is not None and gamma.requires_grad:
            _accumulate(gamma, _unbroadcast(g * xhat, gamma.shape))
        if beta is not None and beta.requires_grad:
            _accumulate(beta, _unbroadcast(g, beta.shape))
        if a.requires_grad:
            gx = g * gamma.data if gamma is not None else g
            gx = inv * (
                gx
                - gx.mean(axis=-1, keepdims=True)
                - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            )
            _accumulate(a, gx)

    return _result(out_data, parents, backward)


def topk_indices(values, k: int):
    """Indices of the ``k`` largest entries per row, descending; ties go to the lower index."""
    v = values.data if isinstance(values, Tensor) else np.asarray(values, dtype=np.float64)
    m = v.shape[-1]
    if not 1 <= k <= m:
        raise ValueError(f"k must lie in [1, {m}], got {k}")
    return np.argsort(-v, axis=-1, kind="stable")[..., :k]


def topk_mask(values, k: int) -> Tensor:
    """Keep the ``k`` largest entries of each row, zero the rest (no renormalisation)."""
    values = as_tensor(values)
    idx = topk_indices(values, k)
    keep = np.zeros(values.shape, dtype=bool)
    np.put_along_axis(keep, idx, True, axis=-1)
    return _result(
        np.where(keep, values.data, 0.0), (values,), lambda g: _accumulate(values, np.where(keep, g, 0.0))
    )


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-softmax of ``logits``."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and targets {targets.shape} do not match")
    n, c = logits.shape
    if n == 0:
        raise ShapeError("cross_entropy of an empty batch")
    if targets.min() < 0 or targets.max() >= c:
        raise ValueError(f"targets must lie in [0, {c})")
    _check_finite(logits)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, targets] -= 1.0
        _accumulate(logits, d * (g / n))

    return _result(np.asarray(loss), (logits,), backward)


# ---------------------------------------------------------------- verification


def grad_check(f, params, eps=1e-5, max_coords=None, seed=0) -> float:
    """Largest relative error between tape gradients and central differences.

    ``f`` is a zero-argument callable returning a scalar tensor computed from
    ``params``.  With ``max_coords`` set, each parameter is probed at that
    many randomly chosen coordinates instead of all of them.
    """
    if not 0 < eps <= 1e-3:
        raise ValueError("eps must lie in (0, 1e-3]")
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
        if not np.isfinite(loss.data).all():
            raise NumericError("loss is not finite")
        tape.backward(loss)
    analytic = [p.grad_or_zeros().reshape(-1).copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ValueError("parameter data must be contiguous")
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f().data)
            flat[i] = orig - eps
            down = float(f().data)
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericError("loss is not finite under perturbation")
            numeric = (up - down) / (2 * eps)
            denom = max(abs(a[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(a[i] - numeric) / denom)
    return worst
