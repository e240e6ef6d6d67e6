"""Attention kernels and blocks against the scalar oracle and invariants."""

import numpy as np
import numpy.testing as npt
import pytest

from helpers import check_grads, weighted_sum
from oracles import xca_reference
from pyrflow import attention, ops
from pyrflow.autodiff import Parameter, Tensor, no_grad

RNG = np.random.default_rng(11)


def rand(*shape):
    return RNG.standard_normal(shape)


def run_xca(K, Q, V, tau, heads, return_attn=False):
    rho = Tensor(np.log(tau))
    with no_grad():
        res = attention.xca_attend(
            Tensor(K), Tensor(Q), Tensor(V), rho, heads, return_attn=return_attn
        )
    if return_attn:
        return res[0].data, res[1].data
    return res.data


class TestXcaKernel:
    def test_against_scalar_oracle(self):
        rng = np.random.default_rng(0)
        for trial in range(30):
            heads = int(rng.choice([1, 2, 4]))
            dh = int(rng.integers(1, 3))
            d = heads * dh
            n = int(rng.integers(1, 17))
            K, Q, V = (rng.standard_normal((n, d)) * 2 for _ in range(3))
            tau = np.exp(rng.standard_normal(heads) * 0.5)
            got = run_xca(K, Q, V, tau, heads)
            want = xca_reference(K, Q, V, tau, heads)
            npt.assert_allclose(got, want, atol=1e-12)

    def test_columns_sum_to_one(self):
        K, Q, V = rand(10, 8), rand(10, 8), rand(10, 8)
        _, attn = run_xca(K, Q, V, np.ones(2), 2, return_attn=True)
        assert attn.shape == (2, 4, 4)
        npt.assert_allclose(attn.sum(axis=1), 1.0, atol=1e-12)

    def test_heads_equal_width_returns_v(self):
        d = 6
        K, Q, V = rand(9, d), rand(9, d), rand(9, d)
        out = run_xca(K, Q, V, np.ones(d), d)
        npt.assert_array_equal(out, V)

    def test_attention_size_independent_of_tokens(self):
        for n in (4, 64, 256):
            _, attn = run_xca(rand(n, 8), rand(n, 8), rand(n, 8), np.ones(4), 4, True)
            assert attn.shape == (4, 2, 2)

    def test_permutation_equivariance(self):
        n, d = 24, 8
        K, Q, V = rand(n, d), rand(n, d), rand(n, d)
        perm = np.random.default_rng(3).permutation(n)
        out = run_xca(K, Q, V, np.ones(2), 2)
        out_p = run_xca(K[perm], Q[perm], V[perm], np.ones(2), 2)
        npt.assert_allclose(out[perm], out_p, atol=1e-12)

    def test_heads_must_divide(self):
        with pytest.raises(ValueError, match="divide"):
            run_xca(rand(4, 6), rand(4, 6), rand(4, 6), np.ones(4), 4)

    def test_grad(self):
        n, d, heads = 6, 4, 2
        rho = rand(heads) * 0.3
        fn = weighted_sum(
            lambda k, q, v, r: attention.xca_attend(k, q, v, r, heads), rand(n, d)
        )
        check_grads(fn, [rand(n, d), rand(n, d), rand(n, d), rho])


class TestPositionalEmbedding:
    def test_shape_and_determinism(self):
        a = attention.positional_embedding(8, 5, 7)
        b = attention.positional_embedding(8, 5, 7)
        assert a.shape == (8, 5, 7)
        npt.assert_array_equal(a, b)

    def test_zero_input_returns_embedding(self):
        pe = attention.positional_embedding(6, 4, 4)
        with no_grad():
            out = attention.add_positional(Tensor(np.zeros((6, 4, 4)))).data
        npt.assert_array_equal(out, pe)

    def test_rows_and_cols_distinct_up_to_64(self):
        # distinct per-axis encodings imply distinct grid embeddings
        pe = attention.positional_embedding(8, 64, 64)
        row_vecs = pe[:4, :, 0].T  # (64, 4)
        col_vecs = pe[4:, 0, :].T
        for vecs in (row_vecs, col_vecs):
            diff = np.abs(vecs[:, None, :] - vecs[None, :, :]).max(axis=-1)
            diff[np.diag_indices(64)] = np.inf
            assert diff.min() > 1e-4

    def test_full_grid_distinct_small(self):
        pe = attention.positional_embedding(6, 16, 16)
        flat = pe.reshape(6, -1).T
        diff = np.abs(flat[:, None, :] - flat[None, :, :]).max(axis=-1)
        diff[np.diag_indices(flat.shape[0])] = np.inf
        assert diff.min() > 1e-6


class TestHeadSplit:
    def test_head_blocks_are_contiguous_channel_slices(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((10, 8))
        w = rng.standard_normal((8, 8))
        proj = x @ w
        with no_grad():
            headed = attention.split_heads(ops.matmul(Tensor(x), Tensor(w)), 4).data
        for g in range(4):
            npt.assert_array_equal(headed[g], proj[:, g * 2 : (g + 1) * 2])

    def test_merge_inverts_split(self):
        x = rand(12, 8)
        with no_grad():
            back = attention.merge_heads(attention.split_heads(Tensor(x), 4)).data
        npt.assert_array_equal(back, x)


def make_global_block(d=8, heads=2, seed=0, gamma_init=1.0):
    return attention.GlobalContextBlock(
        d, heads, 2, np.random.default_rng(seed), gamma_init=gamma_init
    )


def make_cross_block(d_ctx=8, d_mf=6, heads=2, seed=0, gamma_init=1.0):
    return attention.CrossMotionBlock(
        d_ctx, d_mf, heads, 2, np.random.default_rng(seed), gamma_init=gamma_init
    )


class TestGlobalContextBlock:
    def test_zero_gamma_is_input_plus_embedding(self):
        blk = make_global_block(gamma_init=0.0)
        x = rand(8, 4, 5)
        with no_grad():
            out = blk(Tensor(x)).data
        pe = attention.positional_embedding(8, 4, 5)
        npt.assert_array_equal(out, x + pe)

    def test_shape_preserved(self):
        blk = make_global_block()
        with no_grad():
            out = blk(Tensor(rand(8, 3, 6))).data
        assert out.shape == (8, 3, 6)

    def test_grad_through_block(self):
        blk = make_global_block(d=4, heads=2)
        x = rand(4, 3, 3)
        wts = rand(4, 3, 3)

        def fn(xx):
            return ops.sum_(ops.mul(blk(xx), wts))

        check_grads(fn, [x])

    def test_grad_of_parameters(self):
        from helpers import check_param_grads

        blk = make_global_block(d=4, heads=2)
        x = rand(4, 3, 3)
        wts = rand(4, 3, 3)
        check_param_grads(
            blk,
            lambda: ops.sum_(ops.mul(blk(Tensor(x)), wts)),
            names=[
                "w_k.weight",
                "rho",
                "gamma_attn",
                "tail.lpi.conv1.weight",
                "tail.ffn_in.bias",
                "ln_attn.gamma",
            ],
        )


class TestCrossMotionBlock:
    def test_zero_gamma_returns_motion_untouched(self):
        blk = make_cross_block(gamma_init=0.0)
        gc = rand(8, 4, 4)
        mf = rand(6, 4, 4)
        with no_grad():
            out = blk(Tensor(gc), Tensor(mf)).data
        npt.assert_array_equal(out, mf)

    def test_width_mismatch_supported(self):
        blk = make_cross_block(d_ctx=8, d_mf=4)
        with no_grad():
            out = blk(Tensor(rand(8, 3, 5)), Tensor(rand(4, 3, 5))).data
        assert out.shape == (4, 3, 5)

    def test_zero_key_path_gives_uniform_mixture(self):
        # with zero K/Q projections the normalized columns are zero, logits
        # vanish, and each head's output channels are the uniform average of
        # that head's value channels
        d_mf, heads = 6, 2
        blk = make_cross_block(d_ctx=8, d_mf=d_mf, heads=heads)
        blk.w_k.weight.data[:] = 0.0
        blk.w_k.bias.data[:] = 0.0
        blk.w_q.weight.data[:] = 0.0
        blk.w_q.bias.data[:] = 0.0
        gc = rand(8, 3, 3)
        mf = rand(d_mf, 3, 3)
        mf_tokens = mf.reshape(d_mf, -1).T
        v = mf_tokens @ blk.w_v.weight.data + blk.w_v.bias.data
        with no_grad():
            att = attention.xca_attend(
                blk.w_k(blk.ln_ctx(attention.to_tokens(attention.add_positional(Tensor(gc))))),
                blk.w_q(blk.ln_ctx(attention.to_tokens(attention.add_positional(Tensor(gc))))),
                Tensor(v),
                blk.rho,
                heads,
            ).data
        dh = d_mf // heads
        for g in range(heads):
            head_mean = v[:, g * dh : (g + 1) * dh].mean(axis=1)
            for j in range(dh):
                npt.assert_allclose(att[:, g * dh + j], head_mean, atol=1e-12)

    def test_grad_through_both_inputs(self):
        blk = make_cross_block(d_ctx=4, d_mf=4, heads=2)
        wts = rand(4, 3, 3)

        def fn(gc, mf):
            return ops.sum_(ops.mul(blk(gc, mf), wts))

        check_grads(fn, [rand(4, 3, 3), rand(4, 3, 3)])


class TestLocalInteraction:
    def test_eval_mode_confined_to_5x5(self):
        d = 4
        lpi = attention.LocalInteraction(d, np.random.default_rng(2))
        lpi.eval()
        base = rand(d, 9, 9)
        bumped = base.copy()
        bumped[:, 4, 4] += 1.0
        with no_grad():
            a = lpi(Tensor(base)).data
            b = lpi(Tensor(bumped)).data
        diff = np.abs(b - a).max(axis=0)
        yy, xx = np.nonzero(diff > 1e-14)
        assert len(yy) > 0
        assert np.max(np.abs(yy - 4)) <= 2
        assert np.max(np.abs(xx - 4)) <= 2

    def test_running_stats_update_only_in_train(self):
        lpi = attention.LocalInteraction(3, np.random.default_rng(0))
        before = lpi.norm._buffers["running_mean"].copy()
        with no_grad():
            lpi.eval()(Tensor(rand(3, 5, 5)))
        npt.assert_array_equal(lpi.norm._buffers["running_mean"], before)
        lpi.train()
        with no_grad():
            lpi(Tensor(rand(3, 5, 5) + 5.0))
        assert not np.allclose(lpi.norm._buffers["running_mean"], before)
