"""Pure-NumPy kernel backend.

Mirrors the API of the compiled extension ``cosh3d._core`` and is selected
automatically when the extension is not built.  Both kernels expect float64
C-contiguous inputs; the dispatch layer in :mod:`cosh3d.backend` guarantees
this.
"""

import numpy as np

BACKEND_NAME = "python"

# Row block size for the quadratic kernel: keeps the score buffer at
# O(block * N) instead of O(N^2).
_BLOCK = 512


def softmax_attention(q, k, v):
    """Row-wise softmax(Q K^T) V without the sqrt(d) scaling.

    O(N^2 d) time, O(block * N) scratch memory.  The row max is subtracted
    before exponentiation; the normalized weights are unchanged by the shift.
    """
    n = q.shape[0]
    out = np.empty_like(v)
    for start in range(0, n, _BLOCK):
        rows = slice(start, min(start + _BLOCK, n))
        scores = q[rows] @ k.T
        scores -= scores.max(axis=1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=1, keepdims=True)
        out[rows] = scores @ v
    return out


def cosh_attention_linear(q, k, v, a, m, eps):
    """Linearized cosh-reweighted attention, O(N d^2) time.

    Raw projections come in; ReLU is applied here.  Row i of the output is
    the normalized reweighted sum over keys j with weight
    ``(Q'_i . K'_j) * (2 - cosh(a * (i - j) / m))``, evaluated through the
    hyperbolic addition identity so the key-side summaries are accumulated
    once.  Queries occupy positions 1..Nq, keys 1..Nk.  Rows whose weight
    sum falls below ``eps`` yield zero vectors.
    """
    nq = q.shape[0]
    nk = k.shape[0]
    qp = np.maximum(q, 0.0)
    kp = np.maximum(k, 0.0)
    vp = np.maximum(v, 0.0)

    ti = (a / m) * np.arange(1, nq + 1)
    tj = (a / m) * np.arange(1, nk + 1)
    # u_i . w_j == (Q'_i . K'_j) * (2 - cosh(a*(i-j)/m))
    u = np.hstack([2.0 * qp, -np.cosh(ti)[:, None] * qp, np.sinh(ti)[:, None] * qp])
    w = np.hstack([kp, np.cosh(tj)[:, None] * kp, np.sinh(tj)[:, None] * kp])

    summary = w.T @ vp          # (3d, d)
    normalizer = w.sum(axis=0)  # (3d,)

    num = u @ summary
    den = u @ normalizer
    out = np.zeros_like(num)
    live = den >= eps
    np.divide(num, den[:, None], out=out, where=live[:, None])
    return out
