"""Dense float64 tensors with minimal reverse-mode differentiation.

Everything is double precision and row-major. There is no general
broadcasting: shapes must match exactly except for the documented
scalar and last-dim cases. Any op that produces a non-finite value
raises NonFiniteError naming the offending node.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "ComputationRecord",
    "tensor",
    "zeros",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "sum_all",
    "mean_all",
    "mean_axis",
    "add_broadcast",
    "add_bias",
    "expand_axis",
    "softmax_lastdim",
    "layer_norm",
    "gelu",
    "gather_rows",
    "gather_tokens",
    "cross_entropy_logits",
    "sdp_attention",
    "backward",
    "build_record",
    "finite_diff_check",
]


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


_ids = itertools.count()


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse mode.

    `_parents` and `_vjp` encode one node of the computation graph;
    `build_record` flattens the graph into a topologically ordered
    ComputationRecord for the backward sweep.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op", "_id")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("non-finite values in tensor constructor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._op = "leaf"
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def is_finite(self):
        return bool(np.all(np.isfinite(self.data)))

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self._op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return _shift(self, float(other))
        return add(self, other)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return _shift(self, -float(other))
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def _node(data, op, parents, vjp):
    out = Tensor.__new__(Tensor)
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite output of op {op!r}")
    out.data = arr
    out.grad = None
    out._op = op
    out._id = next(_ids)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    _same_shape(a, b, "add")
    return _node(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b):
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a, b):
    _same_shape(a, b, "mul")
    return _node(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def scale(a, s):
    s = float(s)
    return _node(a.data * s, "scale", (a,), lambda g: (g * s,))


def _shift(a, s):
    return _node(a.data + s, "shift", (a,), lambda g: (g,))


def matmul(a, b):
    """Matrix product over the last two axes.

    `b` may be 2-D (shared across leading batch axes of `a`) or have
    exactly the same leading axes as `a`.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul: operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions disagree {a.shape} vs {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch dimensions disagree {a.shape} vs {b.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        if b.ndim == 2 and gb.ndim > 2:
            gb = gb.sum(axis=tuple(range(gb.ndim - 2)))
        return ga, gb

    return _node(a.data @ b.data, "matmul", (a, b), vjp)


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), "transpose", (a,),
                 lambda g: (np.transpose(g, inv),))


def reshape(a, shape):
    old = a.shape
    return _node(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def sum_all(a):
    return _node(a.data.sum(), "sum_all", (a,), lambda g: (np.full(a.shape, float(g)),))


def mean_all(a):
    n = a.data.size
    return _node(a.data.mean(), "mean_all", (a,),
                 lambda g: (np.full(a.shape, float(g) / n),))


def mean_axis(a, axis):
    n = a.shape[axis]

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).copy(),)

    return _node(a.data.mean(axis=axis), "mean_axis", (a,), vjp)


def add_broadcast(a, p, axis):
    """a + p expanded along `axis`; p has a's shape with `axis` removed."""
    expected = a.shape[:axis] + a.shape[axis + 1:]
    if p.shape != expected:
        raise ValueError(f"add_broadcast: expected shape {expected}, got {p.shape}")
    return _node(a.data + np.expand_dims(p.data, axis), "add_broadcast", (a, p),
                 lambda g: (g, g.sum(axis=axis)))


def add_bias(a, b):
    """a + b broadcast over the last dimension; b has shape [a.shape[-1]]."""
    if b.shape != (a.shape[-1],):
        raise ValueError(f"add_bias: bias shape {b.shape} does not match last dim of {a.shape}")
    lead = tuple(range(a.ndim - 1))
    return _node(a.data + b.data, "add_bias", (a, b), lambda g: (g, g.sum(axis=lead)))


def expand_axis(p, axis, n):
    """Insert an axis of length n by repetition; gradient sums over it."""
    def vjp(g):
        return (g.sum(axis=axis),)

    data = np.broadcast_to(np.expand_dims(p.data, axis),
                           p.shape[:axis] + (n,) + p.shape[axis:]).copy()
    return _node(data, "expand_axis", (p,), vjp)


def softmax_lastdim(a):
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ValueError("softmax_lastdim: empty last dimension")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, "softmax_lastdim", (a,), vjp)


def layer_norm(a, gamma, beta, eps=1e-5):
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError("layer_norm: gamma/beta must match the last dimension")
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv

    def vjp(g):
        lead = tuple(range(a.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _node(xhat * gamma.data + beta.data, "layer_norm", (a, gamma, beta), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    y = 0.5 * x * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du),)

    return _node(y, "gelu", (a,), vjp)


def _perm_map(perm, n):
    m = np.asarray(getattr(perm, "map", perm), dtype=np.intp)
    if m.shape != (n,) or not np.array_equal(np.sort(m), np.arange(n)):
        raise ValueError("gather: permutation is not a bijection on the row indices")
    return m


def gather_rows(a, perm):
    """out[j] = a[perm(j)]; gradient scatters through the inverse map."""
    if a.ndim != 2:
        raise ValueError("gather_rows: expected a 2-D tensor")
    m = _perm_map(perm, a.shape[0])

    def vjp(g):
        ga = np.empty_like(g)
        ga[m] = g
        return (ga,)

    return _node(a.data[m], "gather_rows", (a,), vjp)


def gather_tokens(a, maps):
    """Per-frame row gather: out[t, j] = a[t, maps[t, j]] for a [T, n, c]."""
    if a.ndim != 3:
        raise ValueError("gather_tokens: expected a [T, n, c] tensor")
    t_len, n, _ = a.shape
    maps = np.asarray(maps, dtype=np.intp)
    if maps.shape != (t_len, n):
        raise ValueError("gather_tokens: maps shape must be [T, n]")
    rows = np.arange(t_len)[:, None]
    for m in maps:
        if not np.array_equal(np.sort(m), np.arange(n)):
            raise ValueError("gather_tokens: each row of maps must be a bijection")

    def vjp(g):
        ga = np.empty_like(g)
        ga[rows, maps] = g
        return (ga,)

    return _node(a.data[rows, maps], "gather_tokens", (a,), vjp)


def cross_entropy_logits(logits, labels):
    """Mean cross-entropy of [B, k] logits (or [k] for a single example)."""
    squeeze = logits.ndim == 1
    z = logits.data[None, :] if squeeze else logits.data
    labels = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    b, k = z.shape
    if labels.shape != (b,) or labels.min() < 0 or labels.max() >= k:
        raise ValueError("cross_entropy_logits: labels out of range")
    m = z.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=-1))
    loss = (lse - z[np.arange(b), labels]).mean()

    def vjp(g):
        p = np.exp(z - m)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(b), labels] -= 1.0
        p *= float(g) / b
        return (p[0] if squeeze else p,)

    return _node(loss, "cross_entropy", (logits,), vjp)


def sdp_attention(q, k, v):
    """softmax(q kᵀ / √d) v over the last two axes; q, k, v share shapes."""
    if q.shape != k.shape or q.shape != v.shape:
        raise ValueError("sdp_attention: q, k, v must share one shape")
    d = q.shape[-1]
    scores = scale(matmul(q, transpose(k, tuple(range(q.ndim - 2)) + (q.ndim - 1, q.ndim - 2))),
                   1.0 / math.sqrt(d))
    return matmul(softmax_lastdim(scores), v)


@dataclass
class RecordEntry:
    op: str
    input_ids: tuple
    output_id: int
    node: Tensor


@dataclass
class ComputationRecord:
    """Topologically ordered list of primitive applications."""

    entries: list

    def __len__(self):
        return len(self.entries)


def build_record(loss):
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node._id in seen:
            continue
        seen.add(node._id)
        stack.append((node, True))
        for p in node._parents:
            if p._id not in seen:
                stack.append((p, False))
    entries = [RecordEntry(n._op, tuple(p._id for p in n._parents), n._id, n)
               for n in order if n._vjp is not None]
    return ComputationRecord(entries)


def backward(loss, record=None):
    """Accumulate gradients of a scalar loss into all requires_grad leaves."""
    if loss.data.ndim != 0:
        raise ValueError("backward: loss must be a scalar")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any requires_grad tensor")
    if record is None:
        record = build_record(loss)
    grads = {loss._id: np.ones(())}
    for entry in reversed(record.entries):
        node = entry.node
        g = grads.pop(node._id, None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None:
                continue
            if not np.all(np.isfinite(pg)):
                raise NonFiniteError(f"non-finite gradient out of op {node._op!r}")
            if parent._vjp is None:
                if parent.requires_grad:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            elif parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg
    if loss._vjp is None:
        # scalar leaf: d loss / d loss = 1
        loss.grad = np.ones(()) if loss.grad is None else loss.grad + np.ones(())


def finite_diff_check(f, params, h=1e-6):
    """Max relative error between reverse-mode and central-difference grads.

    `f` maps the parameter list to a scalar Tensor. Error per entry is
    |g_ad - g_fd| / max(1, |g_fd|); the max over all entries is returned.
    """
    if h <= 0:
        raise ValueError("finite_diff_check: h must be positive")
    for p in params:
        p.zero_grad()
    loss = f(params)
    backward(loss)
    worst = 0.0
    for p in params:
        g_ad = p.grad if p.grad is not None else np.zeros(p.shape)
        flat = p.data.reshape(-1)
        g_flat = np.asarray(g_ad, dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f(params).item()
            flat[i] = orig - h
            down = f(params).item()
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NonFiniteError("finite_diff_check: non-finite evaluation")
            g_fd = (up - down) / (2.0 * h)
            err = abs(g_flat[i] - g_fd) / max(1.0, abs(g_fd))
            worst = max(worst, err)
    return worst
