"""Embedding, encoder blocks, decoder, and parameter serialization."""

import numpy as np
import pytest

from conftest import central_difference, gradcheck_error, kink_free

from cosh3d import attention as att
from cosh3d import transformer as tfm
from cosh3d.roi import FEATURE_WIDTH


def make_block(d, n_heads, a, seed, d_ff=None):
    rng = np.random.default_rng(seed)
    return tfm.EncoderBlockParams.create(d, n_heads, a, d_ff or 4 * d, rng)


def make_decoder(d, n_heads, a, seed, d_ff=None, random_query=False):
    rng = np.random.default_rng(seed)
    dec = tfm.DecoderParams.create(d, n_heads, a, d_ff or 4 * d, rng)
    if random_query:
        dec.query_embedding = kink_free(rng, (1, d))
    return dec


class TestEmbedding:
    def test_zero_parameters_give_zero_output(self):
        params = tfm.EmbeddingParams(
            w1=np.zeros((FEATURE_WIDTH, 8)), b1=np.zeros(8),
            w2=np.zeros((8, 4)), b2=np.zeros(4),
        )
        out = tfm.embed_point_features(np.random.default_rng(0).normal(size=(5, 28)), params)
        np.testing.assert_array_equal(out, 0.0)

    def test_identity_first_layer_on_nonneg_input(self):
        hidden = 30
        rng = np.random.default_rng(1)
        w1 = np.zeros((FEATURE_WIDTH, hidden))
        w1[:, :FEATURE_WIDTH] = np.eye(FEATURE_WIDTH)
        w2 = rng.normal(size=(hidden, 6))
        params = tfm.EmbeddingParams(w1=w1, b1=np.zeros(hidden), w2=w2, b2=np.zeros(6))
        p = np.abs(rng.normal(size=(7, FEATURE_WIDTH)))
        padded = np.hstack([p, np.zeros((7, hidden - FEATURE_WIDTH))])
        np.testing.assert_allclose(tfm.embed_point_features(p, params), padded @ w2, atol=1e-12)

    def test_matches_manual_two_step(self):
        rng = np.random.default_rng(0)
        params = tfm.EmbeddingParams.create(16, 12, rng)
        p = rng.normal(size=(9, FEATURE_WIDTH))
        manual = np.maximum(p @ params.w1 + params.b1, 0.0) @ params.w2 + params.b2
        np.testing.assert_allclose(tfm.embed_point_features(p, params), manual, atol=1e-12)

    def test_wrong_width_rejected(self):
        params = tfm.EmbeddingParams.create(8, 8, np.random.default_rng(2))
        with pytest.raises(ValueError):
            tfm.embed_point_features(np.zeros((3, 27)), params)

    def test_gradcheck(self):
        rng = np.random.default_rng(3)
        params = tfm.EmbeddingParams.create(6, 10, rng)
        p = kink_free(rng, (5, FEATURE_WIDTH))
        d_out = rng.normal(size=(5, 6))

        def loss():
            return float((d_out * tfm.embed_point_features(p, params)).sum())

        _, cache = tfm.embed_forward(p, params)
        grads = tfm.embed_backward(cache, d_out, params)
        for name in ("w1", "b1", "w2", "b2"):
            fd = central_difference(loss, getattr(params, name), h=1e-5)
            assert gradcheck_error(grads[name], fd) < 1e-4


class TestLayerNorm:
    def test_rows_standardized(self):
        rng = np.random.default_rng(4)
        x = rng.normal(2.0, 3.0, size=(10, 16))
        y, _ = tfm.layernorm_forward(x, np.ones(16), np.zeros(16))
        np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-12)
        # variance sits at sigma^2 / (sigma^2 + eps), i.e. 1 up to O(eps)
        np.testing.assert_allclose(y.var(axis=1), 1.0, atol=2 * tfm.LN_EPS)

    def test_constant_row_maps_to_beta(self):
        beta = np.arange(4.0)
        y, _ = tfm.layernorm_forward(np.zeros((1, 4)), np.ones(4), beta)
        np.testing.assert_allclose(y, beta[None, :], atol=1e-12)

    def test_gradcheck(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(6, 8))
        gamma = rng.normal(1.0, 0.2, size=8)
        beta = rng.normal(size=8)
        d_y = rng.normal(size=(6, 8))

        def loss():
            out, _ = tfm.layernorm_forward(x, gamma, beta)
            return float((d_y * out).sum())

        _, cache = tfm.layernorm_forward(x, gamma, beta)
        d_x, d_gamma, d_beta = tfm.layernorm_backward(cache, d_y)
        for arr, analytic in ((x, d_x), (gamma, d_gamma), (beta, d_beta)):
            fd = central_difference(loss, arr, h=1e-6)
            assert gradcheck_error(analytic, fd) < 1e-4


class TestEncoderBlock:
    def test_shape_preserved(self):
        rng = np.random.default_rng(6)
        block = make_block(8, 2, 1.1, seed=0)
        for n in (1, 5, 33):
            x = rng.normal(size=(n, 8))
            assert tfm.encoder_block(x, block).shape == (n, 8)

    def test_fresh_block_rows_standardized(self):
        # gamma starts at 1 and beta at 0, so block output rows sit on the
        # normalized scale
        rng = np.random.default_rng(7)
        block = make_block(16, 4, 0.9, seed=1)
        y = tfm.encoder_block(rng.normal(size=(12, 16)), block)
        np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-10)
        # residual rows can have variance well below 1, so the eps skew in
        # sigma^2 / (sigma^2 + eps) is larger here
        np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-2)

    def test_deterministic_across_runs(self):
        x = np.random.default_rng(8).normal(size=(10, 8))
        outs = []
        for _ in range(2):
            blocks = [make_block(8, 2, 1.1, seed=s) for s in (10, 11, 12)]
            outs.append(tfm.encoder_stack(x, blocks))
        np.testing.assert_array_equal(outs[0], outs[1])

    def test_ffn_width_validated(self):
        with pytest.raises(ValueError):
            make_block(8, 2, 1.1, seed=0, d_ff=4)

    def test_single_block_stack_equals_block(self):
        rng = np.random.default_rng(9)
        block = make_block(8, 2, 0.5, seed=2)
        x = rng.normal(size=(6, 8))
        np.testing.assert_array_equal(
            tfm.encoder_stack(x, [block]), tfm.encoder_block(x, block)
        )

    def test_three_block_stack_shape(self):
        rng = np.random.default_rng(10)
        blocks = [make_block(8, 2, 1.1, seed=s) for s in range(3)]
        x = rng.normal(size=(20, 8))
        assert tfm.encoder_stack(x, blocks).shape == (20, 8)

    def test_stack_permutation_equivariance_at_zero_scale(self):
        rng = np.random.default_rng(11)
        blocks = [make_block(8, 2, 0.0, seed=s) for s in range(3)]
        x = rng.normal(size=(14, 8))
        perm = rng.permutation(14)
        base = tfm.encoder_stack(x, blocks)
        permuted = tfm.encoder_stack(x[perm], blocks)
        np.testing.assert_allclose(permuted, base[perm], atol=1e-9)

    def test_not_equivariant_with_positional_weighting(self):
        rng = np.random.default_rng(12)
        blocks = [make_block(8, 2, 1.1, seed=s) for s in range(2)]
        x = rng.normal(size=(14, 8))
        perm = np.roll(np.arange(14), 5)
        base = tfm.encoder_stack(x, blocks)
        permuted = tfm.encoder_stack(x[perm], blocks)
        assert np.abs(permuted - base[perm]).max() > 1e-6


class TestDecoder:
    def test_zero_query_fresh_model_uses_tail_only(self):
        dec = make_decoder(8, 2, 1.1, seed=0)
        rng = np.random.default_rng(13)
        encoded = rng.normal(size=(9, 8))
        out = tfm.decode_global(encoded, dec)
        # dead query -> attention term is zero; output is the norm/FFN tail
        # applied to the zero residual
        expected, _ = tfm._block_tail_forward(np.zeros((1, 8)), np.zeros((1, 8)), dec.block)
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_single_key_attention_passes_value_row(self):
        # positive query and projections keep every head's weight sum live,
        # so the one value row passes straight through
        dec = make_decoder(8, 2, 1.1, seed=1, random_query=True)
        p = dec.block.attn
        p.w_q = np.abs(p.w_q)
        p.w_k = np.abs(p.w_k)
        dec.query_embedding = np.abs(dec.query_embedding) + 0.1
        rng = np.random.default_rng(14)
        encoded = np.abs(rng.normal(size=(1, 8))) + 0.1
        attn = att.multihead_cosh_attention(dec.query_embedding, encoded, p)
        expected = np.maximum(encoded @ p.w_v, 0.0) @ p.w_o
        np.testing.assert_allclose(attn, expected, atol=1e-10)

    def test_emits_exactly_one_row(self):
        dec = make_decoder(8, 2, 0.7, seed=2, random_query=True)
        encoded = np.random.default_rng(15).normal(size=(21, 8))
        assert tfm.decode_global(encoded, dec).shape == (1, 8)

    def test_permutation_invariance_at_zero_scale(self):
        dec = make_decoder(8, 2, 0.0, seed=3, random_query=True)
        rng = np.random.default_rng(16)
        encoded = rng.normal(size=(15, 8))
        base = tfm.decode_global(encoded, dec)
        permuted = tfm.decode_global(encoded[rng.permutation(15)], dec)
        np.testing.assert_allclose(permuted, base, atol=1e-9)

    def test_query_shape_validated(self):
        block = make_block(8, 2, 1.1, seed=4)
        with pytest.raises(ValueError):
            tfm.DecoderParams(query_embedding=np.zeros((2, 8)), block=block)


class TestStackGradients:
    def test_full_encoder_decoder_gradcheck(self):
        # tiny instance: N=8, d=8, H=2; query randomized so every path is
        # active and away from the dead zone
        rng = np.random.default_rng(17)
        blocks = [make_block(8, 2, 1.1, seed=20 + s, d_ff=16) for s in range(2)]
        dec = make_decoder(8, 2, 1.1, seed=30, d_ff=16, random_query=True)
        x = kink_free(rng, (8, 8))
        d_out = rng.normal(size=(1, 8))

        def loss():
            enc = tfm.encoder_stack(x, blocks)
            return float((d_out * tfm.decode_global(enc, dec)).sum())

        enc, stack_caches = tfm.encoder_stack_forward(x, blocks)
        _, dec_cache = tfm.decode_forward(enc, dec)
        d_encoded, dec_grads = tfm.decode_backward(dec_cache, d_out, dec)
        d_x, block_grads = tfm.encoder_stack_backward(stack_caches, d_encoded, blocks)

        fd = central_difference(loss, x, h=1e-5)
        assert gradcheck_error(d_x, fd) < 1e-4

        named = dict(dec.named_tensors())
        for name, analytic in dec_grads.items():
            key = name if name in named else name  # attn.* names match
            fd = central_difference(loss, named[key], h=1e-5)
            assert gradcheck_error(analytic, fd) < 1e-4, f"decoder {name}"

        for bi, grads in enumerate(block_grads):
            named = dict(blocks[bi].named_tensors())
            for name, analytic in grads.items():
                fd = central_difference(loss, named[name], h=1e-5)
                assert gradcheck_error(analytic, fd) < 1e-4, f"block{bi} {name}"


class TestSerialization:
    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(18)

        class Bundle:
            def __init__(self, d, n_heads, n_blocks, fill):
                self.blocks = [
                    tfm.EncoderBlockParams.create(d, n_heads, 1.1, 2 * d, fill)
                    for _ in range(n_blocks)
                ]

            def named_tensors(self):
                for i, b in enumerate(self.blocks):
                    yield from b.named_tensors(f"block{i}.")

        src = Bundle(8, 2, 3, rng)
        path = tmp_path / "params.bin"
        tfm.write_tensor_stream(path, 8, 2, 3, src.named_tensors())

        def factory(d, n_heads, n_blocks):
            assert (d, n_heads, n_blocks) == (8, 2, 3)
            return Bundle(d, n_heads, n_blocks, np.random.default_rng(99))

        loaded = tfm.read_tensor_stream(path, factory)
        for (n1, t1), (n2, t2) in zip(src.named_tensors(), loaded.named_tensors()):
            assert n1 == n2
            np.testing.assert_array_equal(t1, t2)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTPARAM" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            tfm.read_tensor_stream(path, lambda *a: None)

    def test_truncation_detected(self, tmp_path):
        rng = np.random.default_rng(19)
        block = tfm.EncoderBlockParams.create(4, 2, 1.1, 8, rng)
        path = tmp_path / "params.bin"
        tfm.write_tensor_stream(path, 4, 2, 1, block.named_tensors())
        data = path.read_bytes()
        path.write_bytes(data[:-8])

        def factory(d, n_heads, n_blocks):
            return tfm.EncoderBlockParams.create(d, n_heads, 1.1, 8, np.random.default_rng(0))

        with pytest.raises(ValueError, match="truncated"):
            tfm.read_tensor_stream(path, factory)
