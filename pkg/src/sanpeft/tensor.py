"""Dense tensors with reverse-mode automatic differentiation.

Values live in numpy arrays (float64 by default).  Every primitive
operation that touches a tensor with ``requires_grad`` records a node
carrying a monotonically increasing sequence number; sorting the nodes
reachable from a loss by that number yields the computation tape, which
``backward`` walks in reverse.

Broadcasting is deliberately narrow: the second operand of an elementwise
op must have the same shape as the first, or a shape equal to a trailing
suffix of it (a per-channel vector against ``[..., d]`` features, or a
scalar).
"""
import contextlib
import itertools
import math

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError, DomainError, NumericError

_seq = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _contig(arr):
    # np.ascontiguousarray promotes 0-d arrays to 1-d
    arr = np.asarray(arr)
    return arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced non-finite values")
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_seq", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype if dtype is not None else np.float64, copy=True)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(np.float64)
        if arr.ndim and 0 in arr.shape:
            raise DimensionError(f"tensor extents must be positive, got shape {arr.shape}")
        self.data = _check_finite(_contig(arr), "tensor construction")
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.name = name
        self._parents = ()
        self._backward = None
        self._seq = next(_seq)

    @classmethod
    def _result(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = _check_finite(_contig(data), op)
        out.name = None
        out.grad = None
        out._seq = next(_seq)
        live = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = live
        out._parents = parents if live else ()
        out._backward = backward if live else None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

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

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not a primitive; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _const_like(x, ref):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype), dtype=ref.dtype)


# ---------------------------------------------------------------------------
# tape and backward
# ---------------------------------------------------------------------------


class ComputationTape:
    """Operations reachable from a scalar loss, in recording order."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss):
        seen = {}
        stack = [loss]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen[id(t)] = t
            stack.extend(t._parents)
        nodes = sorted(seen.values(), key=lambda t: t._seq)
        return cls(nodes)

    def __len__(self):
        return len(self.nodes)

    def is_topological(self):
        pos = {id(t): i for i, t in enumerate(self.nodes)}
        return all(pos[id(p)] < pos[id(t)] for t in self.nodes for p in t._parents)


def backward(loss):
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; use ``zero_grads`` to reset.
    """
    if not isinstance(loss, Tensor) or loss.shape != ():
        shape = getattr(loss, "shape", type(loss).__name__)
        raise ContractError(f"backward needs a scalar loss, got shape {shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not attached to a tape (no input requires grad)")
    tape = ComputationTape.from_loss(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = node.grad + g if node.grad is not None else g.copy()
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            _check_finite(pg, "backward")
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a, b):
    """``a @ b`` for ``a: [..., m, k]`` and ``b: [k, n]`` or ``[..., k, n]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (
        b.ndim > 2 and a.shape[:-2] != b.shape[:-2]
    ):
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return Tensor._result(ad @ bd, (a, b), bw, "matmul")


def _broadcast_ok(a_shape, b_shape):
    return len(b_shape) <= len(a_shape) and tuple(a_shape[len(a_shape) - len(b_shape):]) == tuple(b_shape)


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    return g.reshape((-1,) + tuple(shape)).sum(axis=0)


def elementwise(op, a, b):
    """``add``/``sub``/``mul`` with trailing-axis broadcast of ``b`` into ``a``."""
    a = as_tensor(a)
    b = _const_like(b, a)
    if not _broadcast_ok(a.shape, b.shape):
        raise DimensionError(f"{op}: cannot broadcast {b.shape} into {a.shape}")
    ad, bd = a.data, b.data
    with np.errstate(over="ignore", invalid="ignore"):  # non-finite results are rejected by _result
        return _elementwise(op, a, b, ad, bd)


def _elementwise(op, a, b, ad, bd):
    if op == "add":
        out = ad + bd

        def bw(g):
            return g, _reduce_to(g, bd.shape)
    elif op == "sub":
        out = ad - bd

        def bw(g):
            return g, -_reduce_to(g, bd.shape)
    elif op == "mul":
        out = ad * bd

        def bw(g):
            return g * bd, _reduce_to(g * ad, bd.shape)
    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    return Tensor._result(out, (a, b), bw, op)


def add(a, b):
    return elementwise("add", a, b)


def sub(a, b):
    return elementwise("sub", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def neg(a):
    return elementwise("mul", a, -1.0)


def tsum(a):
    a = as_tensor(a)
    shape = a.shape
    return Tensor._result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a):
    a = as_tensor(a)
    shape, n = a.shape, a.data.size
    return Tensor._result(
        np.asarray(a.data.sum() / n), (a,), lambda g: (np.full(shape, g / n, dtype=a.dtype),), "mean"
    )


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def gelu(a):
    """Tanh-approximated GELU."""
    a = as_tensor(a)
    flat = a.data.reshape(-1)
    out = kernels.gelu(flat).reshape(a.shape)
    return Tensor._result(
        out, (a,), lambda g: (kernels.gelu_backward(flat, np.ascontiguousarray(g).reshape(-1)).reshape(a.shape),), "gelu"
    )


def identity(a):
    return as_tensor(a)


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise DomainError("log of a non-positive value")
    ad = a.data
    return Tensor._result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def softmax(a):
    """Softmax over the last axis."""
    a = as_tensor(a)
    if a.ndim < 1:
        raise DimensionError("softmax needs at least one axis")
    x2 = a.data.reshape(-1, a.shape[-1])
    y2 = kernels.softmax_rows(x2)

    def bw(g):
        g2 = np.ascontiguousarray(g).reshape(y2.shape)
        return (kernels.softmax_rows_backward(y2, g2).reshape(a.shape),)

    return Tensor._result(y2.reshape(a.shape), (a,), bw, "softmax")


def normalize(a, eps=1e-5):
    """Per-row zero mean / unit variance over the last axis (no affine)."""
    a = as_tensor(a)
    if a.ndim < 1 or a.shape[-1] == 0:
        raise DimensionError("normalize needs a non-empty last axis")
    x2 = a.data.reshape(-1, a.shape[-1])
    xhat, inv, active = kernels.normalize_rows(x2, float(eps))

    def bw(g):
        g2 = np.ascontiguousarray(g).reshape(xhat.shape)
        return (kernels.normalize_rows_backward(xhat, inv, active, g2).reshape(a.shape),)

    return Tensor._result(xhat.reshape(a.shape), (a,), bw, "normalize")


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of ``[B, C]`` logits against integer labels."""
    logits = as_tensor(logits)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise DimensionError("cross_entropy: label outside [0, classes)")
    loss, probs = kernels.cross_entropy_rows(logits.data, labels)
    n = labels.shape[0]

    def bw(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return Tensor._result(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")


def transpose(a):
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise DimensionError(f"transpose needs >= 2 axes, got {a.shape}")
    return Tensor._result(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {shape}") from exc
    return Tensor._result(out, (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shape mismatch: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(out, tuple(tensors), bw, "concat")


def slice_axis(a, start, stop, axis):
    a = as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return Tensor._result(a.data[idx], (a,), bw, "slice")


def select(a, index, axis):
    """Pick one position along ``axis`` (the axis is dropped)."""
    s = slice_axis(a, index, index + 1, axis)
    shape = list(s.shape)
    del shape[axis]
    return reshape(s, tuple(shape))


def expand(a, leading):
    """Broadcast ``a`` to ``(*leading, *a.shape)``."""
    a = as_tensor(a)
    shape = tuple(leading) + a.shape
    return Tensor._result(
        np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_reduce_to(g, a.shape),), "expand"
    )


_UNARY = {
    "sum": tsum,
    "mean": mean,
    "relu": relu,
    "gelu": gelu,
    "softmax_lastaxis": softmax,
    "exp": exp,
    "log": log,
}


def reductions_and_nonlinear(op, a):
    try:
        fn = _UNARY[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}; expected one of {sorted(_UNARY)}") from None
    return fn(a)


ACTIVATIONS = {"relu": relu, "gelu": gelu, "identity": identity}


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def finite_diff_grad(f, x, eps=1e-5):
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``f`` receives a Tensor with one coordinate perturbed by +-eps and must
    return a scalar (Tensor or float).
    """
    x = as_tensor(x)
    base = np.array(x.data, dtype=np.float64)
    out = np.empty_like(base)
    flat = out.reshape(-1)
    with no_grad():
        for i in range(base.size):
            plus = base.copy().reshape(-1)
            minus = base.copy().reshape(-1)
            plus[i] += eps
            minus[i] -= eps
            fp = float(_scalar(f(Tensor(plus.reshape(base.shape)))))
            fm = float(_scalar(f(Tensor(minus.reshape(base.shape)))))
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"non-finite function value at coordinate {i}")
            flat[i] = (fp - fm) / (2.0 * eps)
    return Tensor(out)


def _scalar(v):
    if isinstance(v, Tensor):
        if v.shape != ():
            raise ContractError(f"finite_diff_grad needs a scalar function, got shape {v.shape}")
        return v.data
    return v


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``; returns the maximum."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max()) if a.size else 0.0
