"""Encoder/decoder assembly around the cosh-attention kernels.

Post-norm residual blocks: y1 = LN(x + Attn(x)), y2 = LN(y1 + FFN(y1)).
The decoder mirrors the block structure with a single learned query doing
cross-attention over the encoded points.  Every layer comes in two
flavors: a plain inference function and a ``*_forward``/``*_backward``
pair that threads caches for the analytic gradients.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import attention as att
from .roi import FEATURE_WIDTH

# A larger-than-customary epsilon: the decoder query is zero-initialized,
# so the first training step differentiates layer norm at an exactly
# constant row, where the gradient scales as 1/sqrt(eps).  1e-3 keeps that
# one-time kick small enough for plain gradient descent.
LN_EPS = 1e-3

_MAGIC = b"CSH3DPRM"
_FORMAT_VERSION = 1


def _uniform_linear(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# Point-feature embedding: two linear layers with one ReLU between them.
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        if self.w1.shape[0] != FEATURE_WIDTH:
            raise ValueError(f"embedding input width must be {FEATURE_WIDTH}, got {self.w1.shape[0]}")
        if self.w1.shape[1] != self.b1.shape[0] or self.w2.shape[0] != self.b1.shape[0]:
            raise ValueError("embedding layer shapes do not chain")
        if self.w2.shape[1] != self.b2.shape[0]:
            raise ValueError("embedding output bias width mismatch")

    @classmethod
    def create(cls, d, hidden, rng):
        return cls(
            w1=_uniform_linear(rng, FEATURE_WIDTH, (FEATURE_WIDTH, hidden)),
            b1=_uniform_linear(rng, FEATURE_WIDTH, (hidden,)),
            w2=_uniform_linear(rng, hidden, (hidden, d)),
            b2=_uniform_linear(rng, hidden, (d,)),
        )

    def named_tensors(self, prefix=""):
        yield prefix + "w1", self.w1
        yield prefix + "b1", self.b1
        yield prefix + "w2", self.w2
        yield prefix + "b2", self.b2


def embed_forward(p, params):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != FEATURE_WIDTH:
        raise ValueError(f"expected (n, {FEATURE_WIDTH}) point features, got {p.shape}")
    pre = p @ params.w1 + params.b1
    hid = np.maximum(pre, 0.0)
    out = hid @ params.w2 + params.b2
    return out, (p, pre, hid)


def embed_point_features(p, params):
    """(n, 28) proposal-aware features -> (n, d) embeddings."""
    out, _ = embed_forward(p, params)
    return out


def embed_backward(cache, d_out, params):
    p, pre, hid = cache
    d_hid = d_out @ params.w2.T
    d_pre = d_hid * (pre > 0)
    grads = {
        "w1": p.T @ d_pre,
        "b1": d_pre.sum(axis=0),
        "w2": hid.T @ d_out,
        "b2": d_out.sum(axis=0),
    }
    return grads


# ---------------------------------------------------------------------------
# Layer normalization over channels, learned scale/shift.
# ---------------------------------------------------------------------------


def layernorm_forward(x, gamma, beta, eps=None):
    if eps is None:
        eps = LN_EPS
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    return gamma * x_hat + beta, (x_hat, inv_std, gamma)


def layernorm_backward(cache, d_y):
    x_hat, inv_std, gamma = cache
    d_gamma = (d_y * x_hat).sum(axis=0)
    d_beta = d_y.sum(axis=0)
    g = d_y * gamma
    d_x = inv_std * (
        g - g.mean(axis=1, keepdims=True) - x_hat * (g * x_hat).mean(axis=1, keepdims=True)
    )
    return d_x, d_gamma, d_beta


# ---------------------------------------------------------------------------
# Encoder block.
# ---------------------------------------------------------------------------


@dataclass
class EncoderBlockParams:
    attn: att.AttentionParams
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray
    norm1_gamma: np.ndarray
    norm1_beta: np.ndarray
    norm2_gamma: np.ndarray
    norm2_beta: np.ndarray

    def __post_init__(self):
        d = self.attn.d
        d_ff = self.ffn_w1.shape[1]
        if d_ff < d:
            raise ValueError(f"FFN hidden width {d_ff} must be >= d={d}")
        if self.ffn_w1.shape != (d, d_ff) or self.ffn_w2.shape != (d_ff, d):
            raise ValueError("FFN shapes do not chain d -> d_ff -> d")
        for name, vec, width in (
            ("ffn_b1", self.ffn_b1, d_ff),
            ("ffn_b2", self.ffn_b2, d),
            ("norm1_gamma", self.norm1_gamma, d),
            ("norm1_beta", self.norm1_beta, d),
            ("norm2_gamma", self.norm2_gamma, d),
            ("norm2_beta", self.norm2_beta, d),
        ):
            if vec.shape != (width,):
                raise ValueError(f"{name} must have shape ({width},), got {vec.shape}")
            if not np.isfinite(vec).all():
                raise ValueError(f"{name} contains non-finite entries")

    @classmethod
    def create(cls, d, n_heads, a, d_ff, rng):
        return cls(
            attn=att.AttentionParams.create(d, n_heads, a, rng),
            ffn_w1=_uniform_linear(rng, d, (d, d_ff)),
            ffn_b1=_uniform_linear(rng, d, (d_ff,)),
            ffn_w2=_uniform_linear(rng, d_ff, (d_ff, d)),
            ffn_b2=_uniform_linear(rng, d_ff, (d,)),
            norm1_gamma=np.ones(d),
            norm1_beta=np.zeros(d),
            norm2_gamma=np.ones(d),
            norm2_beta=np.zeros(d),
        )

    def named_tensors(self, prefix=""):
        yield prefix + "attn.w_q", self.attn.w_q
        yield prefix + "attn.w_k", self.attn.w_k
        yield prefix + "attn.w_v", self.attn.w_v
        yield prefix + "attn.w_o", self.attn.w_o
        yield prefix + "ffn_w1", self.ffn_w1
        yield prefix + "ffn_b1", self.ffn_b1
        yield prefix + "ffn_w2", self.ffn_w2
        yield prefix + "ffn_b2", self.ffn_b2
        yield prefix + "norm1_gamma", self.norm1_gamma
        yield prefix + "norm1_beta", self.norm1_beta
        yield prefix + "norm2_gamma", self.norm2_gamma
        yield prefix + "norm2_beta", self.norm2_beta


def _ffn_forward(x, params):
    pre = x @ params.ffn_w1 + params.ffn_b1
    hid = np.maximum(pre, 0.0)
    return hid @ params.ffn_w2 + params.ffn_b2, (x, pre, hid)


def _ffn_backward(cache, d_out, params):
    x, pre, hid = cache
    d_hid = d_out @ params.ffn_w2.T
    d_pre = d_hid * (pre > 0)
    grads = {
        "ffn_w1": x.T @ d_pre,
        "ffn_b1": d_pre.sum(axis=0),
        "ffn_w2": hid.T @ d_out,
        "ffn_b2": d_out.sum(axis=0),
    }
    return d_pre @ params.ffn_w1.T, grads


def _block_tail_forward(base, attn_out, params):
    # shared by encoder block and decoder: residual + norm, FFN residual + norm
    r1 = base + attn_out
    y1, ln1_cache = layernorm_forward(r1, params.norm1_gamma, params.norm1_beta)
    ffn_out, ffn_cache = _ffn_forward(y1, params)
    r2 = y1 + ffn_out
    y2, ln2_cache = layernorm_forward(r2, params.norm2_gamma, params.norm2_beta)
    return y2, (ln1_cache, ffn_cache, ln2_cache)


def _block_tail_backward(cache, d_y2, params):
    ln1_cache, ffn_cache, ln2_cache = cache
    d_r2, d_g2, d_b2 = layernorm_backward(ln2_cache, d_y2)
    d_ffn_in, ffn_grads = _ffn_backward(ffn_cache, d_r2, params)
    d_y1 = d_r2 + d_ffn_in
    d_r1, d_g1, d_b1 = layernorm_backward(ln1_cache, d_y1)
    grads = dict(ffn_grads)
    grads.update(
        norm1_gamma=d_g1, norm1_beta=d_b1, norm2_gamma=d_g2, norm2_beta=d_b2
    )
    return d_r1, grads


def encoder_block_forward(x, params):
    attn_out, attn_cache = att.multihead_forward(x, x, params.attn)
    y2, tail_cache = _block_tail_forward(x, attn_out, params)
    return y2, (attn_cache, tail_cache)


def encoder_block(x, params):
    """One self-attention block; shape-preserving (n, d) -> (n, d)."""
    out, _ = encoder_block_forward(x, params)
    return out


def encoder_block_backward(cache, d_out, params):
    attn_cache, tail_cache = cache
    d_r1, grads = _block_tail_backward(tail_cache, d_out, params)
    d_x_q, d_x_kv, attn_grads = att.multihead_backward(attn_cache, d_r1)
    for name, g in attn_grads.items():
        grads["attn." + name] = g
    d_x = d_r1 + d_x_q + d_x_kv
    return d_x, grads


def encoder_stack_forward(x, blocks):
    caches = []
    for blk in blocks:
        x, cache = encoder_block_forward(x, blk)
        caches.append(cache)
    return x, caches


def encoder_stack(x, blocks):
    """Sequential application of encoder blocks."""
    out, _ = encoder_stack_forward(x, blocks)
    return out


def encoder_stack_backward(caches, d_out, blocks):
    per_block_grads = [None] * len(blocks)
    for idx in range(len(blocks) - 1, -1, -1):
        d_out, per_block_grads[idx] = encoder_block_backward(caches[idx], d_out, blocks[idx])
    return d_out, per_block_grads


# ---------------------------------------------------------------------------
# Single-query decoder.
# ---------------------------------------------------------------------------


@dataclass
class DecoderParams:
    query_embedding: np.ndarray
    block: EncoderBlockParams

    def __post_init__(self):
        self.query_embedding = np.asarray(self.query_embedding, dtype=np.float64)
        if self.query_embedding.shape != (1, self.block.attn.d):
            raise ValueError(
                f"query embedding must be (1, {self.block.attn.d}), "
                f"got {self.query_embedding.shape}"
            )

    @classmethod
    def create(cls, d, n_heads, a, d_ff, rng):
        return cls(
            query_embedding=np.zeros((1, d)),
            block=EncoderBlockParams.create(d, n_heads, a, d_ff, rng),
        )

    def named_tensors(self, prefix=""):
        yield prefix + "query_embedding", self.query_embedding
        yield from self.block.named_tensors(prefix)


def decode_forward(encoded, params):
    q = params.query_embedding
    attn_out, attn_cache = att.multihead_forward(q, encoded, params.block.attn)
    out, tail_cache = _block_tail_forward(q, attn_out, params.block)
    return out, (attn_cache, tail_cache)


def decode_global(encoded, params):
    """Pool encoded point features into one (1, d) proposal representation."""
    out, _ = decode_forward(encoded, params)
    return out


def decode_backward(cache, d_out, params):
    attn_cache, tail_cache = cache
    d_r1, grads = _block_tail_backward(tail_cache, d_out, params.block)
    d_q_attn, d_encoded, attn_grads = att.multihead_backward(attn_cache, d_r1)
    for name, g in attn_grads.items():
        grads["attn." + name] = g
    grads["query_embedding"] = d_r1 + d_q_attn
    return d_encoded, grads


# ---------------------------------------------------------------------------
# Flat binary serialization: little-endian header + row-major float64
# tensors in declaration order.
# ---------------------------------------------------------------------------


def write_tensor_stream(path, d, n_heads, n_blocks, named_tensors):
    with open(path, "wb") as fh:
        fh.write(struct.pack("<8sIIII", _MAGIC, _FORMAT_VERSION, d, n_heads, n_blocks))
        for _, tensor in named_tensors:
            fh.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())


def read_tensor_stream(path, named_tensors_factory):
    """Read header, rebuild parameters via the factory, fill them in order.

    ``named_tensors_factory(d, n_heads, n_blocks)`` must return an object
    whose ``named_tensors()`` yields arrays in the declaration order used
    when writing.
    """
    with open(path, "rb") as fh:
        header = fh.read(struct.calcsize("<8sIIII"))
        magic, version, d, n_heads, n_blocks = struct.unpack("<8sIIII", header)
        if magic != _MAGIC:
            raise ValueError(f"not a parameter file (magic {magic!r})")
        if version != _FORMAT_VERSION:
            raise ValueError(f"unsupported format version {version}")
        obj = named_tensors_factory(d, n_heads, n_blocks)
        for name, tensor in obj.named_tensors():
            raw = fh.read(tensor.size * 8)
            if len(raw) != tensor.size * 8:
                raise ValueError(f"truncated parameter file while reading {name}")
            tensor[...] = np.frombuffer(raw, dtype="<f8").reshape(tensor.shape)
        if fh.read(1):
            raise ValueError("trailing bytes after final tensor")
    return obj
