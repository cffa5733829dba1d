# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel backend.

Hot attention kernels with the Python-level overhead stripped out: tight C
loops for the elementwise work, BLAS dgemm for the matrix products.  Same
API and same math as :mod:`cosh3d._core_py`.
"""

import numpy as np

from libc.math cimport exp, cosh, sinh
from scipy.linalg.cython_blas cimport dgemm

BACKEND_NAME = "compiled"

# Row block for the quadratic kernel; bounds scratch memory at BLOCK * N.
cdef int _BLOCK = 256


cdef void _gemm_rm(bint trans_a, bint trans_b,
                   double[:, ::1] a, double[:, ::1] b, double[:, ::1] c,
                   double alpha, double beta) noexcept nogil:
    """c = alpha * op(a) @ op(b) + beta * c for row-major operands.

    dgemm is column-major, so the transposed product op(b)^T op(a)^T is
    evaluated instead; the operand swap makes the output land in row-major
    ``c`` directly.
    """
    cdef char cta = b'T' if trans_a else b'N'
    cdef char ctb = b'T' if trans_b else b'N'
    cdef int m = c.shape[1]
    cdef int n = c.shape[0]
    cdef int k = a.shape[0] if trans_a else a.shape[1]
    cdef int lda = a.shape[1]
    cdef int ldb = b.shape[1]
    cdef int ldc = c.shape[1]
    dgemm(&ctb, &cta, &m, &n, &k, &alpha,
          &b[0, 0], &ldb, &a[0, 0], &lda,
          &beta, &c[0, 0], &ldc)


def softmax_attention(double[:, ::1] q, double[:, ::1] k, double[:, ::1] v):
    """Row-wise softmax(Q K^T) V without the sqrt(d) scaling, O(N^2 d)."""
    cdef int n = q.shape[0]
    cdef int d = q.shape[1]
    cdef int bs = _BLOCK if _BLOCK < n else n
    out_arr = np.empty((n, d))
    scores_arr = np.empty((bs, n))
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] scores = scores_arr
    cdef int start, stop, rows, i, j
    cdef double mx, acc

    for start in range(0, n, bs):
        stop = start + bs
        if stop > n:
            stop = n
        rows = stop - start
        _gemm_rm(False, True, q[start:stop], k, scores[:rows], 1.0, 0.0)
        with nogil:
            for i in range(rows):
                mx = scores[i, 0]
                for j in range(1, n):
                    if scores[i, j] > mx:
                        mx = scores[i, j]
                acc = 0.0
                for j in range(n):
                    scores[i, j] = exp(scores[i, j] - mx)
                    acc += scores[i, j]
                for j in range(n):
                    scores[i, j] /= acc
        _gemm_rm(False, False, scores[:rows], v, out[start:stop], 1.0, 0.0)
    return out_arr


def cosh_attention_linear(double[:, ::1] q, double[:, ::1] k,
                          double[:, ::1] v, double a, long m, double eps):
    """Linearized cosh-reweighted attention, O(N d^2).

    ReLU is applied to the raw inputs here.  The stacked representation
    u_i = [2 Q'_i, -cosh(ai/m) Q'_i, sinh(ai/m) Q'_i] and
    w_j = [K'_j, cosh(aj/m) K'_j, sinh(aj/m) K'_j] gives
    u_i . w_j == (Q'_i . K'_j) * (2 - cosh(a*(i-j)/m)), so one pass over the
    keys accumulates everything the queries need.  Rows whose weight sum
    falls below ``eps`` yield zero vectors.

    Both passes run over row blocks that fit in cache; the stacked
    matrices are never materialized at full length.
    """
    cdef int nq = q.shape[0]
    cdef int nk = k.shape[0]
    cdef int d = q.shape[1]
    cdef int d3 = 3 * d
    cdef int bs = _BLOCK if _BLOCK < nq or _BLOCK < nk else max(nq, nk)

    stacked_arr = np.empty((bs, d3))
    vp_arr = np.empty((bs, d))
    summary_arr = np.zeros((d3, d))
    num_arr = np.empty((bs, d))
    z_arr = np.zeros(d3)
    out_arr = np.zeros((nq, d))
    cdef double[:, ::1] stacked = stacked_arr
    cdef double[:, ::1] vp = vp_arr
    cdef double[:, ::1] summary = summary_arr
    cdef double[:, ::1] num = num_arr
    cdef double[:, ::1] out = out_arr
    cdef double[::1] z = z_arr
    cdef int start, stop, rows, i, j, c
    cdef double t, ch, sh, x, den

    # key pass: accumulate the (3d x d) value summary and the 3d normalizer
    for start in range(0, nk, bs):
        stop = start + bs
        if stop > nk:
            stop = nk
        rows = stop - start
        with nogil:
            for j in range(rows):
                t = a * (start + j + 1) / m
                ch = cosh(t)
                sh = sinh(t)
                for c in range(d):
                    x = k[start + j, c]
                    if x < 0:
                        x = 0
                    stacked[j, c] = x
                    stacked[j, d + c] = ch * x
                    stacked[j, 2 * d + c] = sh * x
                    z[c] += x
                    z[d + c] += ch * x
                    z[2 * d + c] += sh * x
                for c in range(d):
                    x = v[start + j, c]
                    if x < 0:
                        x = 0
                    vp[j, c] = x
        _gemm_rm(True, False, stacked[:rows], vp[:rows], summary, 1.0, 1.0)

    # query pass: numerators via the summary, denominators via the normalizer
    for start in range(0, nq, bs):
        stop = start + bs
        if stop > nq:
            stop = nq
        rows = stop - start
        with nogil:
            for i in range(rows):
                t = a * (start + i + 1) / m
                ch = cosh(t)
                sh = sinh(t)
                for c in range(d):
                    x = q[start + i, c]
                    if x < 0:
                        x = 0
                    stacked[i, c] = 2.0 * x
                    stacked[i, d + c] = -ch * x
                    stacked[i, 2 * d + c] = sh * x
        _gemm_rm(False, False, stacked[:rows], summary, num[:rows], 1.0, 0.0)
        with nogil:
            for i in range(rows):
                den = 0.0
                for c in range(d3):
                    den += stacked[i, c] * z[c]
                if den >= eps:
                    for c in range(d):
                        out[start + i, c] = num[i, c] / den
    return out_arr
