"""Pure numpy versions of the compiled kernels, with the same signatures."""

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_LO = np.uint64(0xFFFFFFFF)
_SHIFT = np.uint64(32)


def philox4x32(key, start, nblocks, stream=0):
    ctr = np.uint64(start) + np.arange(nblocks, dtype=np.uint64)
    c0 = ctr & _LO
    c1 = ctr >> _SHIFT
    c2 = np.full(nblocks, stream & 0xFFFFFFFF, dtype=np.uint64)
    c3 = np.full(nblocks, (stream >> 32) & 0xFFFFFFFF, dtype=np.uint64)
    k0 = key & 0xFFFFFFFF
    k1 = (key >> 32) & 0xFFFFFFFF
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        c0, c1, c2, c3 = (
            (p1 >> _SHIFT) ^ c1 ^ np.uint64(k0),
            p1 & _LO,
            (p0 >> _SHIFT) ^ c3 ^ np.uint64(k1),
            p0 & _LO,
        )
        k0 = (k0 + _W0) & 0xFFFFFFFF
        k1 = (k1 + _W1) & 0xFFFFFFFF
    out = np.empty((nblocks, 4), dtype=np.uint32)
    out[:, 0] = c0
    out[:, 1] = c1
    out[:, 2] = c2
    out[:, 3] = c3
    return out.reshape(-1)


def matmul_into(a, b, out):
    out[...] = np.matmul(a.astype(np.float64), b.astype(np.float64))


def matmul_nt_into(a, b, out):
    out[...] = np.matmul(a.astype(np.float64), b.astype(np.float64).T)


def softmax_rows_into(x, out):
    z = x.astype(np.float64)
    z = np.exp(z - z.max(axis=1, keepdims=True))
    out[...] = z / z.sum(axis=1, keepdims=True)


def layer_norm_into(x, out, eps):
    z = x.astype(np.float64)
    mean = z.mean(axis=1, keepdims=True)
    var = ((z - mean) ** 2).mean(axis=1, keepdims=True)
    out[...] = (z - mean) / np.sqrt(var + eps)
