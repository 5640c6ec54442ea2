"""Dense float64 tensors with reverse-mode differentiation.

A small define-by-run engine: each operation stores its parent tensors and
a closure that maps the output gradient to parent gradients. backward()
replays those closures in reverse topological order. Everything is float64
and CPU-only; the point is correctness that a finite-difference oracle can
confirm, not speed.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

_GRAD_STACK = [True]


@contextmanager
def no_grad():
    """Skip graph recording inside the block (pure evaluation)."""
    _GRAD_STACK.append(False)
    try:
        yield
    finally:
        _GRAD_STACK.pop()


class Tensor:
    """n-d float64 array plus an optional record on the backward graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _coerce(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents, vjp):
    out = Tensor(data)
    if _GRAD_STACK[-1] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(g, shape):
    """Sum g down to `shape` after numpy broadcasting expanded it."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    a, b = _coerce(a), _coerce(b)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(a.data + b.data, (a, b), vjp)


def sub(a, b):
    a, b = _coerce(a), _coerce(b)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(a.data - b.data, (a, b), vjp)


def mul(a, b):
    a, b = _coerce(a), _coerce(b)

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _record(a.data * b.data, (a, b), vjp)


def div(a, b):
    a, b = _coerce(a), _coerce(b)

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _record(a.data / b.data, (a, b), vjp)


def neg(a):
    a = _coerce(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def matmul(a, b):
    a, b = _coerce(a), _coerce(b)
    if (
        a.data.ndim < 2
        or b.data.ndim < 2
        or a.data.shape[-1] != b.data.shape[-2]
    ):
        raise ShapeError(
            f"matmul: shapes {a.data.shape} and {b.data.shape} do not chain"
        )
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(
            f"matmul: shapes {a.data.shape} and {b.data.shape}: {exc}"
        ) from None

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _record(out, (a, b), vjp)


def transpose_last(a):
    """Swap the last two axes."""
    a = _coerce(a)
    return _record(
        np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),)
    )


def concat_last(xs):
    """Concatenate along the last axis, in argument order."""
    ts = [_coerce(x) for x in xs]
    if not ts:
        raise ShapeError("concat_last: need at least one tensor")
    lead = ts[0].data.shape[:-1]
    for t in ts[1:]:
        if t.data.shape[:-1] != lead:
            raise ShapeError(
                f"concat_last: leading shapes differ: {ts[0].data.shape} "
                f"vs {t.data.shape}"
            )
    widths = [t.data.shape[-1] for t in ts]

    def vjp(g):
        grads, start = [], 0
        for w in widths:
            grads.append(g[..., start : start + w])
            start += w
        return tuple(grads)

    return _record(np.concatenate([t.data for t in ts], axis=-1), tuple(ts), vjp)


def narrow(a, axis, start, length):
    """Contiguous slice of `length` entries along `axis`, starting at `start`."""
    a = _coerce(a)
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[index] = g
        return (ga,)

    return _record(a.data[index].copy(), (a,), vjp)


def relu(a):
    a = _coerce(a)
    keep = a.data > 0

    def vjp(g):
        return (g * keep,)

    return _record(np.where(keep, a.data, 0.0), (a,), vjp)


def softplus(a):
    a = _coerce(a)
    out = np.logaddexp(0.0, a.data)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))  # stable sigmoid

    def vjp(g):
        return (g * sig,)

    return _record(out, (a,), vjp)


def exp(a):
    a = _coerce(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _record(out, (a,), vjp)


def log(a):
    a = _coerce(a)

    def vjp(g):
        return (g / a.data,)

    return _record(np.log(a.data), (a,), vjp)


def sum_all(a):
    """Sum of every entry, as a scalar tensor."""
    a = _coerce(a)

    def vjp(g):
        return (np.full_like(a.data, float(g)),)

    return _record(a.data.sum(), (a,), vjp)


def mean_all(a):
    a = _coerce(a)
    n = a.data.size

    def vjp(g):
        return (np.full_like(a.data, float(g) / n),)

    return _record(a.data.mean(), (a,), vjp)


# Mask fill value: large enough that exp(score - rowmax) underflows to an
# exact 0.0 in float64 for any plausible unmasked score magnitude.
MASK_FILL = -1e9


def masked_softmax(scores, mask):
    """Row-wise softmax where disallowed entries get exactly zero weight.

    `mask` is boolean, True = allowed; its shape must match the trailing
    axes of `scores`. Disallowed entries are filled additively with a large
    negative constant before the usual max-subtracted exponentiation, so
    their weight underflows to exactly 0.0.
    """
    s = _coerce(scores)
    m = np.asarray(mask, dtype=bool)
    if m.shape != s.data.shape[s.data.ndim - m.ndim :]:
        raise ShapeError(
            f"masked_softmax: mask shape {m.shape} does not match the "
            f"trailing axes of scores {s.data.shape}"
        )
    if not m.any(axis=-1).all():
        raise ConfigError("masked_softmax: a mask row allows no entries")
    filled = s.data + np.where(m, 0.0, MASK_FILL)
    filled -= filled.max(axis=-1, keepdims=True)
    e = np.exp(filled)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _record(out, (s,), vjp)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to mean 0, variance 1, then scale and shift.

    eps sits inside the square root, so a constant input maps to zeros.
    """
    x, gain, bias = _coerce(x), _coerce(gain), _coerce(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv
    out = gain.data * xhat + bias.data

    def vjp(g):
        gxhat = g * gain.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return (
            gx,
            _unbroadcast(g * xhat, gain.data.shape),
            _unbroadcast(g, bias.data.shape),
        )

    return _record(out, (x, gain, bias), vjp)


def affine(x, weight, bias):
    """x @ weight + bias over the last axis."""
    return add(matmul(x, weight), bias)


def dense(x, weight, bias):
    """Affine map followed by ReLU."""
    return relu(affine(x, weight, bias))


def _topo_order(root):
    """Recorded nodes reachable from root, inputs before consumers."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or node._vjp is None:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(loss):
    """Populate .grad on every tensor the scalar loss depends on."""
    if loss.data.size != 1:
        raise ContractError(
            f"backward: loss must be scalar, got shape {loss.data.shape}"
        )
    loss.grad = np.ones_like(loss.data)
    for node in reversed(_topo_order(loss)):
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g


def zero_grads(params):
    for p in (params.values() if isinstance(params, dict) else params):
        p.grad = None


def gradients(loss, params):
    """backward() plus a name -> gradient map; unreachable leaves get zeros."""
    backward(loss)
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }


def finite_diff_check(f, params, step=1e-5):
    """Max relative disagreement between reverse mode and central differences.

    f is a deterministic zero-argument callable returning the scalar loss as
    a Tensor; params is a dict or list of leaf tensors that f reads. Returns
    max over parameter entries of |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8).
    """
    tensors = list(params.values()) if isinstance(params, dict) else list(params)
    zero_grads(tensors)
    backward(f())
    auto = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        for p in tensors
    ]
    worst = 0.0
    with no_grad():
        for p, ag in zip(tensors, auto):
            flat = p.data.reshape(-1)
            gflat = ag.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + step
                hi = float(f().data)
                flat[i] = keep - step
                lo = float(f().data)
                flat[i] = keep
                fd = (hi - lo) / (2.0 * step)
                err = abs(gflat[i] - fd) / max(abs(gflat[i]), abs(fd), 1e-8)
                if err > worst:
                    worst = err
    return worst


HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
