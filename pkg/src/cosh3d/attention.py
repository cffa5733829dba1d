"""Cosh-reweighted attention.

Four routes through the same math:

* ``softmax_attention``      -- the quadratic softmax reference.
* ``cosh_attention_direct``  -- explicit N x N similarity matrix, O(N^2 d).
  Kept deliberately independent of the kernel backends; it is the oracle
  the linearized form is verified against.
* ``cosh_attention_linear``  -- reassociated form, O(N d^2), dispatched to
  the compiled or NumPy kernel backend.
* ``multihead_cosh_attention`` -- projection, ReLU, head split, per-head
  linear attention, concat, output projection.  Supports self-attention
  and single-query cross-attention.

Analytic gradients for training live here as well
(``cosh_attention_backward`` and the multi-head forward/backward pair).
"""

from dataclasses import dataclass

import numpy as np

from . import backend as _backend

# arccosh(2) = 1.316958..., truncated: keeps 2 - cosh(a * (i-j)/M) >= 0
# for every |i-j| <= M.
A_MAX = 1.3169

# Attention rows whose weight sum falls below this yield zero vectors.
DENOM_EPS = 1e-9


def _as_matrix(x, name):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ValueError(f"{name} must be a 2-D matrix with N >= 1, d >= 1, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite entries")
    return x


def _check_same_shape(q, k, v):
    if q.shape != k.shape or q.shape != v.shape:
        raise ValueError(f"Q, K, V must share one shape, got {q.shape}, {k.shape}, {v.shape}")


def _check_scale(a):
    if not (0.0 <= a <= A_MAX):
        raise ValueError(f"re-weighting scale a={a} outside [0, {A_MAX}]")


def _check_normalizer(m, n):
    if m < n:
        raise ValueError(f"position normalizer M={m} must be >= sequence length N={n}")


def nonneg_project(q, k, v):
    """Elementwise ReLU of Q, K, V (returns new arrays)."""
    q = _as_matrix(q, "Q")
    k = _as_matrix(k, "K")
    v = _as_matrix(v, "V")
    _check_same_shape(q, k, v)
    return np.maximum(q, 0.0), np.maximum(k, 0.0), np.maximum(v, 0.0)


def reweight(a, i, j, m, check=True):
    """Positional weight 2 - cosh(a * (i - j) / m).

    Nonnegative for a <= A_MAX and |i - j| <= m; ``check=False`` skips the
    scale validation so the bound itself can be probed.
    """
    if check:
        _check_scale(a)
    if abs(i - j) > m:
        raise ValueError(f"|i - j| = {abs(i - j)} exceeds normalizer M = {m}")
    return 2.0 - np.cosh(a * (i - j) / m)


@dataclass
class ReweightFactors:
    """cosh(a*i/m) and sinh(a*i/m) for positions i = 1..n."""

    cosh: np.ndarray
    sinh: np.ndarray


def reweight_factors(a, n, m):
    t = (a / m) * np.arange(1, n + 1, dtype=np.float64)
    return ReweightFactors(cosh=np.cosh(t), sinh=np.sinh(t))


def softmax_attention(q, k, v, backend=None):
    """Softmax(Q K^T) V with row-wise softmax; the sqrt(d) scaling is omitted."""
    q = _as_matrix(q, "Q")
    k = _as_matrix(k, "K")
    v = _as_matrix(v, "V")
    _check_same_shape(q, k, v)
    return _backend.get_backend(backend).softmax_attention(q, k, v)


def cosh_attention_direct(q, k, v, a, m, eps=DENOM_EPS, relu_value=True):
    """Cosh-attention through the explicit N x N similarity matrix, O(N^2 d).

    Raw projections in; ReLU applied internally.  Row i of the output is
    sum_j s_ij V'_j / sum_j s_ij with s_ij = (Q'_i . K'_j) * reweight(a,i,j,m);
    rows whose weight sum falls below ``eps`` come back as zero vectors.
    ``relu_value=False`` leaves the value rows unrectified (only Q and K
    need the non-negativity for the weight guarantee).
    """
    q = _as_matrix(q, "Q")
    k = _as_matrix(k, "K")
    v = _as_matrix(v, "V")
    _check_same_shape(q, k, v)
    _check_scale(a)
    n = q.shape[0]
    _check_normalizer(m, n)

    qp, kp = np.maximum(q, 0.0), np.maximum(k, 0.0)
    vp = np.maximum(v, 0.0) if relu_value else v
    pos = np.arange(1, n + 1, dtype=np.float64)
    weights = 2.0 - np.cosh((a / m) * (pos[:, None] - pos[None, :]))
    sim = (qp @ kp.T) * weights
    den = sim.sum(axis=1)
    num = sim @ vp
    out = np.zeros_like(num)
    live = den >= eps
    np.divide(num, den[:, None], out=out, where=live[:, None])
    return out


def cosh_attention_linear(q, k, v, a, m, backend=None, eps=DENOM_EPS, relu_value=True):
    """Linearized cosh-attention, O(N d^2); same result as the direct form.

    ``relu_value=False`` skips the value-side ReLU (NumPy path only; the
    kernel backends always rectify).
    """
    q = _as_matrix(q, "Q")
    k = _as_matrix(k, "K")
    v = _as_matrix(v, "V")
    _check_same_shape(q, k, v)
    _check_scale(a)
    _check_normalizer(m, q.shape[0])
    if not relu_value:
        out, _ = _head_forward(np.maximum(q, 0.0), np.maximum(k, 0.0), v, a, m, eps)
        return out
    return _backend.get_backend(backend).cosh_attention_linear(q, k, v, a, int(m), eps)


# ---------------------------------------------------------------------------
# Single-head forward with cache + backward (training path).
#
# Inputs here are already ReLU'd.  The stacked representation
#   u_i = [2 Q'_i, -cosh(ai/m) Q'_i, sinh(ai/m) Q'_i]   (nq x 3d)
#   w_j = [K'_j, cosh(aj/m) K'_j, sinh(aj/m) K'_j]      (nk x 3d)
# gives s_ij = u_i . w_j, so with A = W^T V' and z = W^T 1:
#   out_i = (u_i A) / (u_i z)
# and the backward pass stays O(N d^2).
# ---------------------------------------------------------------------------


@dataclass
class _HeadCache:
    u: np.ndarray
    w: np.ndarray
    vp: np.ndarray
    summary: np.ndarray
    z: np.ndarray
    num: np.ndarray
    den: np.ndarray
    live: np.ndarray
    factors_q: ReweightFactors
    factors_k: ReweightFactors


def _head_forward(qp, kp, vp, a, m, eps=DENOM_EPS):
    nq = qp.shape[0]
    nk = kp.shape[0]
    fq = reweight_factors(a, nq, m)
    fk = reweight_factors(a, nk, m)
    u = np.hstack([2.0 * qp, -fq.cosh[:, None] * qp, fq.sinh[:, None] * qp])
    w = np.hstack([kp, fk.cosh[:, None] * kp, fk.sinh[:, None] * kp])
    summary = w.T @ vp
    z = w.sum(axis=0)
    num = u @ summary
    den = u @ z
    live = den >= eps
    out = np.zeros_like(num)
    np.divide(num, den[:, None], out=out, where=live[:, None])
    cache = _HeadCache(u, w, vp, summary, z, num, den, live, fq, fk)
    return out, cache


def _head_backward(cache, d_out):
    d = cache.vp.shape[1]
    den = np.where(cache.live, cache.den, 1.0)  # dead rows contribute nothing
    d_num = np.where(cache.live[:, None], d_out / den[:, None], 0.0)
    d_den = np.where(
        cache.live, -(d_out * cache.num).sum(axis=1) / (den * den), 0.0
    )
    d_u = d_num @ cache.summary.T + d_den[:, None] * cache.z[None, :]
    d_summary = cache.u.T @ d_num
    d_z = cache.u.T @ d_den
    d_vp = cache.w @ d_summary
    d_w = cache.vp @ d_summary.T + d_z[None, :]

    fq, fk = cache.factors_q, cache.factors_k
    d_qp = (
        2.0 * d_u[:, :d]
        - fq.cosh[:, None] * d_u[:, d : 2 * d]
        + fq.sinh[:, None] * d_u[:, 2 * d :]
    )
    d_kp = (
        d_w[:, :d]
        + fk.cosh[:, None] * d_w[:, d : 2 * d]
        + fk.sinh[:, None] * d_w[:, 2 * d :]
    )
    return d_qp, d_kp, d_vp


@dataclass
class AttentionGradients:
    """Gradients w.r.t. the raw Q, K, V inputs (shapes match the forward)."""

    dq: np.ndarray
    dk: np.ndarray
    dv: np.ndarray


def cosh_attention_backward(q, k, v, a, m, d_out):
    """Analytic gradients of ``cosh_attention_linear`` w.r.t. raw Q, K, V.

    ``d_out`` is the upstream gradient (N x d).  The ReLU subgradient at
    exactly zero is taken as zero.
    """
    q = _as_matrix(q, "Q")
    k = _as_matrix(k, "K")
    v = _as_matrix(v, "V")
    _check_same_shape(q, k, v)
    d_out = np.asarray(d_out, dtype=np.float64)
    if d_out.shape != q.shape:
        raise ValueError(f"d_out shape {d_out.shape} does not match input shape {q.shape}")
    _check_scale(a)
    _check_normalizer(m, q.shape[0])

    qp, kp, vp = np.maximum(q, 0.0), np.maximum(k, 0.0), np.maximum(v, 0.0)
    _, cache = _head_forward(qp, kp, vp, a, m)
    d_qp, d_kp, d_vp = _head_backward(cache, d_out)
    return AttentionGradients(
        dq=d_qp * (q > 0), dk=d_kp * (k > 0), dv=d_vp * (v > 0)
    )


# ---------------------------------------------------------------------------
# Multi-head attention.
# ---------------------------------------------------------------------------


@dataclass
class AttentionParams:
    """Projection matrices and hyperparameters for one attention layer.

    ``m`` is the position normalizer; ``None`` means "use the larger of
    the query and key counts of the current call" (the key count, for
    the single-query cross-attention).
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    n_heads: int
    a: float
    m: int | None = None

    def __post_init__(self):
        self.w_q = np.ascontiguousarray(self.w_q, dtype=np.float64)
        self.w_k = np.ascontiguousarray(self.w_k, dtype=np.float64)
        self.w_v = np.ascontiguousarray(self.w_v, dtype=np.float64)
        self.w_o = np.ascontiguousarray(self.w_o, dtype=np.float64)
        d = self.w_q.shape[0]
        for name, w in (("w_q", self.w_q), ("w_k", self.w_k),
                        ("w_v", self.w_v), ("w_o", self.w_o)):
            if w.shape != (d, d):
                raise ValueError(f"{name} must be {d}x{d}, got {w.shape}")
        if self.n_heads < 1 or d % self.n_heads != 0:
            raise ValueError(f"head count {self.n_heads} must divide d={d}")
        _check_scale(self.a)

    @property
    def d(self):
        return self.w_q.shape[0]

    @property
    def head_dim(self):
        return self.d // self.n_heads

    @classmethod
    def create(cls, d, n_heads, a, rng, m=None):
        """Uniform(-1/sqrt(d), 1/sqrt(d)) projections."""
        bound = 1.0 / np.sqrt(d)
        w = lambda: rng.uniform(-bound, bound, size=(d, d))
        return cls(w_q=w(), w_k=w(), w_v=w(), w_o=w(), n_heads=n_heads, a=a, m=m)


def _resolve_m(params, nq, nk):
    m = params.m if params.m is not None else max(nq, nk)
    _check_normalizer(m, max(nq, nk))
    return m


def multihead_cosh_attention(x_q, x_kv, params, backend=None, kernel="linear"):
    """Multi-head cosh-attention: project, ReLU, split, attend, concat, project.

    ``x_q`` supplies the queries (its rows take positions 1..N_q) and
    ``x_kv`` the keys/values (positions 1..N_kv); self-attention passes the
    same matrix twice.  ``kernel="direct"`` routes every head through the
    quadratic oracle instead of the linearized kernel.
    """
    x_q = _as_matrix(x_q, "x_q")
    x_kv = _as_matrix(x_kv, "x_kv")
    if x_q.shape[1] != params.d or x_kv.shape[1] != params.d:
        raise ValueError(
            f"inputs must have width d={params.d}, got {x_q.shape[1]} and {x_kv.shape[1]}"
        )
    nq, nk = x_q.shape[0], x_kv.shape[0]
    m = _resolve_m(params, nq, nk)

    q = x_q @ params.w_q
    k = x_kv @ params.w_k
    v = x_kv @ params.w_v
    dh = params.head_dim
    mod = _backend.get_backend(backend)
    heads = []
    for h in range(params.n_heads):
        cols = slice(h * dh, (h + 1) * dh)
        qh = np.ascontiguousarray(q[:, cols])
        kh = np.ascontiguousarray(k[:, cols])
        vh = np.ascontiguousarray(v[:, cols])
        if kernel == "linear":
            heads.append(mod.cosh_attention_linear(qh, kh, vh, params.a, m, DENOM_EPS))
        elif kernel == "direct":
            heads.append(_direct_cross(qh, kh, vh, params.a, m))
        else:
            raise ValueError(f"unknown kernel {kernel!r}")
    return np.hstack(heads) @ params.w_o


def _direct_cross(q, k, v, a, m, eps=DENOM_EPS):
    # Direct-form oracle generalized to nq != nk (query rows at positions
    # 1..nq, key rows at 1..nk).
    qp, kp, vp = np.maximum(q, 0.0), np.maximum(k, 0.0), np.maximum(v, 0.0)
    pos_q = np.arange(1, q.shape[0] + 1, dtype=np.float64)
    pos_k = np.arange(1, k.shape[0] + 1, dtype=np.float64)
    weights = 2.0 - np.cosh((a / m) * (pos_q[:, None] - pos_k[None, :]))
    sim = (qp @ kp.T) * weights
    den = sim.sum(axis=1)
    num = sim @ vp
    out = np.zeros_like(num)
    live = den >= eps
    np.divide(num, den[:, None], out=out, where=live[:, None])
    return out


def multihead_forward(x_q, x_kv, params):
    """Forward pass that keeps the caches needed by ``multihead_backward``."""
    x_q = _as_matrix(x_q, "x_q")
    x_kv = _as_matrix(x_kv, "x_kv")
    nq, nk = x_q.shape[0], x_kv.shape[0]
    m = _resolve_m(params, nq, nk)

    q = x_q @ params.w_q
    k = x_kv @ params.w_k
    v = x_kv @ params.w_v
    qp, kp, vp = np.maximum(q, 0.0), np.maximum(k, 0.0), np.maximum(v, 0.0)
    dh = params.head_dim
    outs, caches = [], []
    for h in range(params.n_heads):
        cols = slice(h * dh, (h + 1) * dh)
        o, cache = _head_forward(qp[:, cols], kp[:, cols], vp[:, cols], params.a, m)
        outs.append(o)
        caches.append(cache)
    concat = np.hstack(outs)
    out = concat @ params.w_o
    return out, (x_q, x_kv, q, k, v, caches, concat, params)


def multihead_backward(cache, d_out):
    """Gradients of ``multihead_forward`` w.r.t. both inputs and all projections."""
    x_q, x_kv, q, k, v, head_caches, concat, params = cache
    d_out = np.asarray(d_out, dtype=np.float64)

    d_w_o = concat.T @ d_out
    d_concat = d_out @ params.w_o.T

    dh = params.head_dim
    d_qp = np.empty_like(q)
    d_kp = np.empty_like(k)
    d_vp = np.empty_like(v)
    for h, hc in enumerate(head_caches):
        cols = slice(h * dh, (h + 1) * dh)
        d_qp[:, cols], d_kp[:, cols], d_vp[:, cols] = _head_backward(hc, d_concat[:, cols])

    d_q = d_qp * (q > 0)
    d_k = d_kp * (k > 0)
    d_v = d_vp * (v > 0)

    grads = {
        "w_q": x_q.T @ d_q,
        "w_k": x_kv.T @ d_k,
        "w_v": x_kv.T @ d_v,
        "w_o": d_w_o,
    }
    d_x_q = d_q @ params.w_q.T
    d_x_kv = d_k @ params.w_k.T + d_v @ params.w_v.T
    return d_x_q, d_x_kv, grads
