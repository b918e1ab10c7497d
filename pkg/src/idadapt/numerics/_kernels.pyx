# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels. Every public function here has a numpy twin in ``_fallback``."""

from libc.math cimport exp, sqrt
from libc.stdint cimport uint32_t, uint64_t
from libc.stdlib cimport free, malloc

import numpy as np

ctypedef fused real:
    float
    double

cdef uint32_t PHILOX_M0 = 0xD2511F53u
cdef uint32_t PHILOX_M1 = 0xCD9E8D57u
cdef uint32_t PHILOX_W0 = 0x9E3779B9u
cdef uint32_t PHILOX_W1 = 0xBB67AE85u


cdef inline void _philox_block(uint32_t* c, uint32_t k0, uint32_t k1) noexcept nogil:
    cdef uint64_t p0, p1
    cdef uint32_t hi0, lo0, hi1, lo1
    cdef int r
    for r in range(10):
        p0 = <uint64_t>PHILOX_M0 * c[0]
        p1 = <uint64_t>PHILOX_M1 * c[2]
        hi0 = <uint32_t>(p0 >> 32)
        lo0 = <uint32_t>p0
        hi1 = <uint32_t>(p1 >> 32)
        lo1 = <uint32_t>p1
        c[0] = hi1 ^ c[1] ^ k0
        c[1] = lo1
        c[2] = hi0 ^ c[3] ^ k1
        c[3] = lo0
        k0 = k0 + PHILOX_W0
        k1 = k1 + PHILOX_W1


def philox4x32(uint64_t key, uint64_t start, Py_ssize_t nblocks, uint64_t stream=0):
    """Philox4x32-10 over counters ``(start + i, stream)`` for ``i < nblocks``."""
    out = np.empty(4 * nblocks, dtype=np.uint32)
    cdef uint32_t[::1] o = out
    cdef uint32_t c[4]
    cdef uint32_t k0 = <uint32_t>key
    cdef uint32_t k1 = <uint32_t>(key >> 32)
    cdef uint64_t ctr
    cdef Py_ssize_t i
    with nogil:
        for i in range(nblocks):
            ctr = start + <uint64_t>i
            c[0] = <uint32_t>ctr
            c[1] = <uint32_t>(ctr >> 32)
            c[2] = <uint32_t>stream
            c[3] = <uint32_t>(stream >> 32)
            _philox_block(c, k0, k1)
            o[4 * i] = c[0]
            o[4 * i + 1] = c[1]
            o[4 * i + 2] = c[2]
            o[4 * i + 3] = c[3]
    return out


cdef inline void _row_block(const real* ar, Py_ssize_t k, const real* b, Py_ssize_t n,
                            double* acc) noexcept nogil:
    cdef Py_ssize_t p = 0, j
    cdef double a0, a1, a2, a3, t
    cdef const real* b0
    cdef const real* b1
    cdef const real* b2
    cdef const real* b3
    while p + 4 <= k:
        a0 = ar[p]
        a1 = ar[p + 1]
        a2 = ar[p + 2]
        a3 = ar[p + 3]
        b0 = b + p * n
        b1 = b0 + n
        b2 = b1 + n
        b3 = b2 + n
        for j in range(n):
            t = acc[j]
            t = t + a0 * b0[j]
            t = t + a1 * b1[j]
            t = t + a2 * b2[j]
            t = t + a3 * b3[j]
            acc[j] = t
        p += 4
    while p < k:
        a0 = ar[p]
        b0 = b + p * n
        for j in range(n):
            acc[j] = acc[j] + a0 * b0[j]
        p += 1


def matmul_into(real[:, ::1] a, real[:, ::1] b, real[:, ::1] out):
    # Each output element is summed over k strictly left to right in double;
    # the four-row unroll only saves accumulator traffic, it keeps that order.
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1]
    cdef Py_ssize_t i, j
    cdef real* op
    if m == 0 or n == 0:
        return
    cdef double* acc = <double*>malloc(n * sizeof(double))
    if acc == NULL:
        raise MemoryError()
    with nogil:
        for i in range(m):
            for j in range(n):
                acc[j] = 0.0
            if k > 0:
                _row_block(&a[i, 0], k, &b[0, 0], n, acc)
            op = &out[i, 0]
            for j in range(n):
                op[j] = <real>acc[j]
    free(acc)


def matmul_nt_into(a, b, out):
    # out = a @ b.T through the row kernel on a transposed copy of b; the
    # per-element summation order over k is unchanged
    matmul_into(a, np.ascontiguousarray(np.asarray(b).T), out)


def softmax_rows_into(real[:, ::1] x, real[:, ::1] out):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double mx, s, e
    cdef double* buf = <double*>malloc(max(n, 1) * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    try:
        with nogil:
            for i in range(m):
                mx = x[i, 0]
                for j in range(1, n):
                    if x[i, j] > mx:
                        mx = x[i, j]
                s = 0.0
                for j in range(n):
                    e = exp(<double>x[i, j] - mx)
                    buf[j] = e
                    s += e
                for j in range(n):
                    out[i, j] = <real>(buf[j] / s)
    finally:
        free(buf)


def layer_norm_into(real[:, ::1] x, real[:, ::1] out, double eps):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double mean, var, d, inv
    with nogil:
        for i in range(m):
            mean = 0.0
            for j in range(n):
                mean += x[i, j]
            mean /= n
            var = 0.0
            for j in range(n):
                d = x[i, j] - mean
                var += d * d
            var /= n
            inv = 1.0 / sqrt(var + eps)
            for j in range(n):
                out[i, j] = <real>((x[i, j] - mean) * inv)
