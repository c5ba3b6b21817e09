# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for software-emulated binary16 arithmetic.

Every kernel operates on float64 buffers whose elements are binary16-valued
and rounds each intermediate result back through binary16, so results are
bit-exact and independent of the host BLAS. Reduction order is sequential
over the trailing axis (canonical row-major order).
"""

import numpy as np

cdef extern from "half_round.h":
    double ca3d_half_round(double x) nogil

cdef extern from "halfgemm.h":
    void ca3d_gemm_half(const float *a, const float *b, float *out,
                        long n, long k, long m, int nthreads) nogil


def round_half(x):
    """Elementwise round-through-binary16 of a float64 array (any shape)."""
    shape = np.shape(x)
    flat = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    out = np.empty_like(flat)
    cdef double[::1] src = flat
    cdef double[::1] dst = out
    cdef Py_ssize_t i, n = src.shape[0]
    with nogil:
        for i in range(n):
            dst[i] = ca3d_half_round(src[i])
    return out.reshape(shape)


def matmul_half(a, b, int num_threads=1):
    """Rounded matmul of binary16-valued arrays: a (N,K) @ b (K,M) -> (N,M).

    out[n, m] = fold_k round(acc + round(a[n,k] * b[k,m])), sequential in k.
    Rows may be computed in parallel without changing any element's
    reduction order, so results are thread-count independent.
    """
    a32 = np.ascontiguousarray(a, dtype=np.float32)
    b32 = np.ascontiguousarray(b, dtype=np.float32)
    cdef long n = a32.shape[0], k = a32.shape[1]
    cdef long kb = b32.shape[0], m = b32.shape[1]
    if kb != k:
        raise ValueError("inner dimensions differ")
    if n == 0 or m == 0 or k == 0:
        return np.zeros((n, m), dtype=np.float64)
    out = np.empty((n, m), dtype=np.float32)
    cdef float[:, ::1] av = a32
    cdef float[:, ::1] bv = b32
    cdef float[:, ::1] ov = out
    cdef int nt = num_threads if num_threads > 0 else 1
    with nogil:
        ca3d_gemm_half(&av[0, 0], &bv[0, 0], &ov[0, 0], n, k, m, nt)
    return out.astype(np.float64)


def sum_half_rows(x):
    """Rounded row sums: out[r] = fold_c round(acc + x[r, c]), sequential in c."""
    x64 = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, ::1] xv = x64
    cdef Py_ssize_t r = xv.shape[0], c = xv.shape[1]
    out_arr = np.empty(r, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double acc
    with nogil:
        for i in range(r):
            acc = 0.0
            for j in range(c):
                acc = ca3d_half_round(acc + xv[i, j])
            out[i] = acc
    return out_arr
