"""Deterministic numeric kernels, seeded randomness and the finite-difference oracle.

Tensors are plain C-contiguous numpy arrays, float32 by default. Kernels also
accept float64 so gradient checks can run below the float32 noise floor.

The heavy kernels come from the compiled ``_kernels`` extension when it was
built; otherwise (or with ``IDADAPT_BACKEND=python``) the numpy twins in
``_fallback`` are used. Both backends accumulate reductions in float64.
"""

from contextlib import contextmanager
import os

import numpy as np

from ..errors import DegenerateInputError, DimensionError, NumericAbort
from . import _fallback
from .rng import RngState, integers, normals, random_words, seeded_normal, uniforms

try:
    from . import _kernels
except ImportError:  # extension not built
    _kernels = None

__all__ = [
    "RngState",
    "backend",
    "cosine_similarity",
    "finite_diff_grad",
    "integers",
    "layer_norm",
    "matmul",
    "normals",
    "random_words",
    "seeded_normal",
    "set_backend",
    "softmax_rows",
    "uniforms",
    "use_backend",
]

_BACKENDS = {"python": _fallback}
if _kernels is not None:
    _BACKENDS["compiled"] = _kernels

_active = _BACKENDS.get(os.environ.get("IDADAPT_BACKEND", "compiled"), None)
if _active is None:
    _active = _kernels if _kernels is not None else _fallback


def _impl():
    return _active


def backend():
    """Name of the kernel backend in use: ``"compiled"`` or ``"python"``."""
    return "compiled" if _active is _kernels and _kernels is not None else "python"


def available_backends():
    return sorted(_BACKENDS)


def set_backend(name):
    global _active
    try:
        _active = _BACKENDS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} not available; have {available_backends()}") from None


@contextmanager
def use_backend(name):
    previous = backend()
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def _float_array(x):
    x = np.asarray(x)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float32)
    return np.ascontiguousarray(x)


def matmul(a, b):
    """Matrix product ``a @ b`` of 2-D tensors with a fixed accumulation order."""
    a = _float_array(a)
    b = _float_array(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if a.dtype != b.dtype:
        dtype = np.promote_types(a.dtype, b.dtype)
        a, b = a.astype(dtype), b.astype(dtype)
    out = np.empty((a.shape[0], b.shape[1]), dtype=a.dtype)
    _active.matmul_into(a, b, out)
    return out


def matmul_nt(a, b):
    """``a @ b.T`` without materialising the transpose."""
    a = _float_array(a)
    b = _float_array(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"matmul_nt: cannot multiply {a.shape} by transpose of {b.shape}")
    if a.dtype != b.dtype:
        dtype = np.promote_types(a.dtype, b.dtype)
        a, b = a.astype(dtype), b.astype(dtype)
    out = np.empty((a.shape[0], b.shape[0]), dtype=a.dtype)
    _active.matmul_nt_into(a, b, out)
    return out


def bmm(a, b):
    """Batched ``a[i] @ b[i]`` over the leading axis."""
    a = _float_array(a)
    b = _float_array(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"bmm: cannot multiply {a.shape} by {b.shape}")
    out = np.empty((a.shape[0], a.shape[1], b.shape[2]), dtype=a.dtype)
    for i in range(a.shape[0]):
        _active.matmul_into(a[i], b[i], out[i])
    return out


def bmm_nt(a, b):
    """Batched ``a[i] @ b[i].T`` over the leading axis."""
    a = _float_array(a)
    b = _float_array(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[2]:
        raise DimensionError(f"bmm_nt: cannot multiply {a.shape} by transpose of {b.shape}")
    out = np.empty((a.shape[0], a.shape[1], b.shape[1]), dtype=a.dtype)
    for i in range(a.shape[0]):
        _active.matmul_nt_into(a[i], b[i], out[i])
    return out


def softmax_rows(x):
    """Row-wise softmax of a 2-D tensor, stabilised by subtracting the row max."""
    x = _float_array(x)
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a 2-D tensor, got shape {x.shape}")
    out = np.empty_like(x)
    _active.softmax_rows_into(x, out)
    return out


def softmax_last(x):
    """Softmax over the last axis of any tensor."""
    x = _float_array(x)
    flat = x.reshape(-1, x.shape[-1])
    out = np.empty_like(flat)
    _active.softmax_rows_into(flat, out)
    return out.reshape(x.shape)


def layer_norm(x, eps=1e-5):
    """Normalise every token (last axis) to zero mean and unit variance; no affine."""
    x = _float_array(x)
    if x.shape[-1] < 2:
        raise DimensionError(f"layer_norm needs width >= 2, got shape {x.shape}")
    flat = x.reshape(-1, x.shape[-1])
    out = np.empty_like(flat)
    _active.layer_norm_into(flat, out, float(eps))
    return out.reshape(x.shape)


def finite_diff_grad(f, x, h=1e-3):
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.result_type(np.asarray(x).dtype, np.float32), copy=True)
    grad = np.empty(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericAbort(f"non-finite function value while differencing coordinate {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return grad.astype(x.dtype)


def cosine_similarity(a, b):
    """Cosine of the angle between two vectors, as a Python float in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise DimensionError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    na = np.sqrt(np.dot(a, a))
    nb = np.sqrt(np.dot(b, b))
    if na == 0.0 or nb == 0.0 or not (np.isfinite(na) and np.isfinite(nb)):
        raise DegenerateInputError("cosine_similarity of a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))
