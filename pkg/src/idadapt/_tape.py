"""Minimal reverse-mode differentiation over numpy arrays.

Internal to the package: the model code builds graphs from these ops and
reads gradients off leaf variables. Each op computes its forward value with
the :mod:`idadapt.numerics` kernels and registers a closure that pushes the
output gradient to its inputs. Parents that do not require gradients are
skipped, so frozen weights cost nothing on the backward pass.
"""

import numpy as np

from . import numerics as nm
from .errors import DimensionError

_SQRT_2_OVER_PI = float(np.sqrt(2.0 / np.pi))


class Var:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad=False, name=None, parents=(), backward=None):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.value.shape}, dtype={self.value.dtype})"


def leaf(value, requires_grad=False, name=None):
    return Var(np.ascontiguousarray(value), requires_grad=requires_grad, name=name)


def _node(value, parents, backward):
    req = any(p.requires_grad for p in parents)
    return Var(value, requires_grad=req, parents=parents if req else (), backward=backward if req else None)


def _push(var, g):
    if not var.requires_grad:
        return
    if var.grad is None:
        var.grad = np.array(g, dtype=var.value.dtype, copy=True)
    else:
        var.grad += g


def backward(root, seed=None):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.value) if seed is None else np.asarray(seed, dtype=root.value.dtype)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# -- linear algebra ---------------------------------------------------------


def linear(x, w, b=None):
    """``x @ w + b`` over the last axis of ``x``; ``w`` is ``[k, n]``."""
    k = x.value.shape[-1]
    if w.value.ndim != 2 or w.value.shape[0] != k:
        raise DimensionError(f"linear: input {x.value.shape} does not match weight {w.value.shape}")
    lead = x.value.shape[:-1]
    x2 = x.value.reshape(-1, k)
    out = nm.matmul(x2, w.value)
    if b is not None:
        out += b.value
    out = out.reshape(lead + (w.value.shape[1],))
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            _push(x, nm.matmul_nt(g2, w.value).reshape(x.value.shape))
        if w.requires_grad:
            _push(w, nm.matmul(np.ascontiguousarray(x2.T), g2))
        if b is not None and b.requires_grad:
            _push(b, g2.sum(axis=0))

    return _node(out, parents, back)


def bmm(a, b):
    out = nm.bmm(a.value, b.value)

    def back(g):
        if a.requires_grad:
            _push(a, nm.bmm_nt(g, b.value))
        if b.requires_grad:
            _push(b, nm.bmm(np.ascontiguousarray(a.value.transpose(0, 2, 1)), g))

    return _node(out, (a, b), back)


def bmm_nt(a, b):
    """Batched ``a @ b^T``."""
    out = nm.bmm_nt(a.value, b.value)

    def back(g):
        if a.requires_grad:
            _push(a, nm.bmm(g, b.value))
        if b.requires_grad:
            _push(b, nm.bmm(np.ascontiguousarray(g.transpose(0, 2, 1)), a.value))

    return _node(out, (a, b), back)


# -- elementwise ------------------------------------------------------------


def _same_shape(op, a, b):
    if a.value.shape != b.value.shape:
        raise DimensionError(f"{op}: shapes {a.value.shape} and {b.value.shape} differ")


def add(a, b):
    _same_shape("add", a, b)

    def back(g):
        _push(a, g)
        _push(b, g)

    return _node(a.value + b.value, (a, b), back)


def sub(a, b):
    _same_shape("sub", a, b)

    def back(g):
        _push(a, g)
        _push(b, -g)

    return _node(a.value - b.value, (a, b), back)


def mul(a, b):
    _same_shape("mul", a, b)

    def back(g):
        _push(a, g * b.value)
        _push(b, g * a.value)

    return _node(a.value * b.value, (a, b), back)


def scale(a, c):
    c = a.value.dtype.type(c)
    return _node(a.value * c, (a,), lambda g: _push(a, g * c))


def mul_const(x, c):
    """``x * c`` for a constant array ``c`` that broadcasts to ``x`` without changing its shape."""
    c = np.asarray(c, dtype=x.value.dtype)
    out = x.value * c
    if out.shape != x.value.shape:
        raise DimensionError(f"mul_const: {c.shape} would reshape {x.value.shape}")
    return _node(out, (x,), lambda g: _push(x, g * c))


def add_const(x, c):
    c = np.asarray(c, dtype=x.value.dtype)
    out = x.value + c
    if out.shape != x.value.shape:
        raise DimensionError(f"add_const: {c.shape} would reshape {x.value.shape}")
    return _node(out, (x,), lambda g: _push(x, g))


def add_rows(x, p):
    """``x[..., *p.shape] + p``, the same table added to every leading index."""
    if x.value.shape[x.value.ndim - p.value.ndim:] != p.value.shape:
        raise DimensionError(f"add_rows: table {p.value.shape} does not fit {x.value.shape}")

    def back(g):
        _push(x, g)
        if p.requires_grad:
            _push(p, g.reshape((-1,) + p.value.shape).sum(axis=0))

    return _node(x.value + p.value, (x, p), back)


def tile(v, n):
    """Stack ``n`` copies of ``v`` along a new leading axis."""
    out = np.broadcast_to(v.value, (n,) + v.value.shape).copy()
    return _node(out, (v,), lambda g: _push(v, g.sum(axis=0)))


def repeat_tokens(v, n):
    """``v[B, d]`` -> ``[B, n, d]`` by repeating each row ``n`` times."""
    out = np.repeat(v.value[:, None, :], n, axis=1)
    return _node(out, (v,), lambda g: _push(v, g.sum(axis=1)))


def silu(x):
    s = 1.0 / (1.0 + np.exp(-x.value))
    out = x.value * s

    def back(g):
        _push(x, g * (s * (1.0 + x.value * (1.0 - s))))

    return _node(out.astype(x.value.dtype), (x,), back)


def gelu(x):
    """tanh approximation of GELU."""
    v = x.value
    v2 = v * v
    th = np.tanh(v * (_SQRT_2_OVER_PI + _SQRT_2_OVER_PI * 0.044715 * v2))
    out = 0.5 * v * (1.0 + th)

    def back(g):
        du = _SQRT_2_OVER_PI + (3 * 0.044715 * _SQRT_2_OVER_PI) * v2
        _push(x, g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du))

    return _node(out.astype(v.dtype, copy=False), (x,), back)


# -- normalisation and attention --------------------------------------------


def layer_norm(x, eps=1e-5):
    out = nm.layer_norm(x.value, eps)

    def back(g):
        v = x.value.astype(np.float64)
        var = v.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xh = (v - v.mean(axis=-1, keepdims=True)) * inv
        g64 = g.astype(np.float64)
        gx = inv * (g64 - g64.mean(axis=-1, keepdims=True) - xh * (g64 * xh).mean(axis=-1, keepdims=True))
        _push(x, gx)

    return _node(out, (x,), back)


def softmax(x):
    """Softmax over the last axis."""
    y = nm.softmax_last(x.value)

    def back(g):
        _push(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _node(y, (x,), back)


def modulate(x, mu, sigma):
    """``x * (1 + sigma) + mu`` with per-sample factors ``[B, d]`` applied to ``x[B, n, d]``."""
    if mu.value.shape != sigma.value.shape or x.value.shape[::2] != mu.value.shape:
        raise DimensionError(
            f"modulate: factors {mu.value.shape}/{sigma.value.shape} do not fit {x.value.shape}"
        )
    s1 = 1.0 + sigma.value[:, None, :]
    out = x.value * s1 + mu.value[:, None, :]

    def back(g):
        _push(x, g * s1)
        _push(mu, g.sum(axis=1))
        if sigma.requires_grad:
            _push(sigma, (g * x.value).sum(axis=1))

    return _node(out, (x, mu, sigma), back)


def gated_residual(x, branch, gamma):
    """``x + gamma * branch`` with per-sample gates ``[B, d]``."""
    _same_shape("gated_residual", x, branch)
    if x.value.shape[::2] != gamma.value.shape:
        raise DimensionError(f"gated_residual: gate {gamma.value.shape} does not fit {x.value.shape}")
    gm = gamma.value[:, None, :]
    out = x.value + gm * branch.value

    def back(g):
        _push(x, g)
        _push(branch, g * gm)
        if gamma.requires_grad:
            _push(gamma, (g * branch.value).sum(axis=1))

    return _node(out, (x, branch, gamma), back)


# -- shape plumbing ---------------------------------------------------------


def reshape(x, shape):
    old = x.value.shape
    return _node(x.value.reshape(shape), (x,), lambda g: _push(x, g.reshape(old)))


def concat(parts, axis):
    values = [p.value for p in parts]
    out = np.concatenate(values, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in values])

    def back(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _push(p, g[tuple(idx)])

    return _node(out, tuple(parts), back)


def take(x, axis, start, stop):
    """Contiguous slice ``[start, stop)`` along ``axis``."""
    idx = [slice(None)] * x.value.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = np.ascontiguousarray(x.value[idx])

    def back(g):
        full = np.zeros_like(x.value)
        full[idx] = g
        _push(x, full)

    return _node(out, (x,), back)


def select_tokens(mask, a, b):
    """Token-wise choice: ``a`` where ``mask`` is 1, ``b`` elsewhere (exact copy)."""
    _same_shape("select_tokens", a, b)
    m = np.asarray(mask, dtype=bool)
    if m.shape != a.value.shape[-2:-1]:
        raise DimensionError(f"select_tokens: mask of length {m.shape} for tokens {a.value.shape}")
    mm = m[:, None]
    out = np.where(mm, a.value, b.value)

    def back(g):
        if a.requires_grad:
            _push(a, np.where(mm, g, 0))
        if b.requires_grad:
            _push(b, np.where(mm, 0, g))

    return _node(out, (a, b), back)


def mean(x, axis):
    n = x.value.shape[axis]
    out = x.value.mean(axis=axis)

    def back(g):
        _push(x, np.broadcast_to(np.expand_dims(g, axis) / n, x.value.shape))

    return _node(out.astype(x.value.dtype), (x,), back)


def sum_all(x):
    out = np.asarray(x.value.sum(), dtype=x.value.dtype)
    return _node(out, (x,), lambda g: _push(x, np.broadcast_to(g, x.value.shape)))


def masked_mse(pred, target, mask):
    """Per-sample mean of ``(pred - target)^2`` over entries where ``mask`` is 1.

    ``target`` and ``mask`` are plain arrays shaped like ``pred``.
    """
    diff = pred.value - target
    axes = tuple(range(1, diff.ndim))
    m = mask.astype(pred.value.dtype)
    counts = m.sum(axis=axes)
    out = (diff * diff * m).sum(axis=axes) / counts
    shape = (-1,) + (1,) * (diff.ndim - 1)

    def back(g):
        _push(pred, 2.0 * diff * m * (g / counts).reshape(shape))

    return _node(out.astype(pred.value.dtype), (pred,), back)


def row_cosine(a, b):
    """Cosine similarity between matching rows of ``a[B, k]`` and constant ``b[B, k]``."""
    av = a.value.astype(np.float64)
    bv = np.asarray(b, dtype=np.float64)
    na = np.sqrt((av * av).sum(axis=1))
    nb = np.sqrt((bv * bv).sum(axis=1))
    dot = (av * bv).sum(axis=1)
    cos = dot / (na * nb)

    def back(g):
        ga = (bv / (na * nb)[:, None] - (cos / na**2)[:, None] * av) * g[:, None]
        _push(a, ga)

    return _node(cos.astype(a.value.dtype), (a,), back)
