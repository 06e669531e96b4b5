import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from efh.autograd import (AttentionMask, AutogradError, ShapeError, Tensor,
                          backward, bilinear_sample, concat, grad_check,
                          layer_norm, matmul, softmax, top_k)
from efh.nn import MultiHeadSelfAttention, make_rng


def t64(arr):
    return Tensor(np.asarray(arr, dtype=np.float64))


class TestMatmul:
    def test_identity(self):
        a = t64(np.eye(2))
        b = t64([[1, 2], [3, 4]])
        assert np.array_equal(matmul(a, b).data, [[1, 2], [3, 4]])

    def test_projector(self):
        a = t64([[1, 0], [0, 0]])
        b = t64([[5, 6], [7, 8]])
        assert np.array_equal(matmul(a, b).data, [[5, 6], [0, 0]])

    def test_against_triple_loop(self):
        rng = make_rng(0)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        ref = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    ref[i, j] += a[i, k] * b[k, j]
        got = matmul(t64(a), t64(b)).data
        assert np.max(np.abs(got - ref)) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


class TestSoftmax:
    def test_symmetry(self):
        assert np.allclose(softmax(t64([0.0, 0.0])).data, [0.5, 0.5])

    def test_shift_stability(self):
        out = softmax(t64([1000.0, 1000.0, 1000.0])).data
        assert np.allclose(out, [1 / 3] * 3)
        assert np.all(np.isfinite(out))

    def test_direct_evaluation(self):
        out = softmax(t64([1.0, 2.0, 3.0])).data
        assert np.allclose(out, [0.09003, 0.24473, 0.66524], atol=1e-5)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
    @settings(max_examples=100, deadline=None)
    def test_slices_sum_to_one(self, values):
        out = softmax(t64(values)).data
        assert abs(out.sum() - 1.0) < 1e-12
        assert np.all(out >= 0)

    def test_f32_tolerance(self):
        rng = make_rng(1)
        x = Tensor(rng.normal(size=(5, 7)).astype(np.float32))
        out = softmax(x, axis=1).data
        assert np.max(np.abs(out.sum(axis=1) - 1.0)) < 1e-6


class TestLayerNorm:
    def test_constant_slice(self):
        x = t64([5.0, 5.0, 5.0])
        out = layer_norm(x, t64(np.ones(3)), t64(np.zeros(3)))
        assert np.allclose(out.data, 0.0)

    def test_hand_evaluation(self):
        x = t64([1.0, 3.0])
        out = layer_norm(x, t64(np.ones(2)), t64(np.zeros(2)), eps=1e-14)
        assert np.allclose(out.data, [-1.0, 1.0], atol=1e-6)

    def test_zero_gamma_gives_beta(self):
        x = t64([2.0, -1.0, 7.0])
        beta = t64([1.0, 2.0, 3.0])
        out = layer_norm(x, t64(np.zeros(3)), beta)
        assert np.allclose(out.data, beta.data)


class TestSelfAttention:
    def test_single_token_weight_one(self):
        rng = make_rng(2)
        attn = MultiHeadSelfAttention(rng, 8, 2, dtype=np.float64)
        x = Tensor(rng.normal(size=(1, 8)))
        w = attn.attention_weights(x)
        assert np.allclose(w, 1.0)
        expected = attn.o(attn.v(x)).data
        assert np.allclose(attn(x).data, expected)

    def test_diagonal_mask_matches_rowwise_singleton(self):
        rng = make_rng(3)
        attn = MultiHeadSelfAttention(rng, 8, 2, dtype=np.float64)
        x = Tensor(rng.normal(size=(5, 8)))
        mask = AttentionMask(np.eye(5, dtype=bool))
        masked = attn(x, mask=mask).data
        rowwise = np.vstack([attn(x[i:i + 1]).data for i in range(5)])
        assert np.allclose(masked, rowwise, atol=1e-12)

    def test_permutation_equivariance(self):
        rng = make_rng(4)
        attn = MultiHeadSelfAttention(rng, 16, 4, dtype=np.float64)
        x = rng.normal(size=(6, 16))
        perm = rng.permutation(6)
        out = attn(Tensor(x)).data
        out_perm = attn(Tensor(x[perm])).data
        assert np.max(np.abs(out_perm - out[perm])) < 1e-10

    def test_blocked_entries_get_zero_weight(self):
        rng = make_rng(5)
        attn = MultiHeadSelfAttention(rng, 8, 2, dtype=np.float64)
        x = Tensor(rng.normal(size=(4, 8)))
        allow = np.ones((4, 4), dtype=bool)
        allow[0, 2] = allow[3, 1] = False
        w = attn.attention_weights(x, mask=AttentionMask(allow))
        assert np.all(w[:, 0, 2] == 0.0)
        assert np.all(w[:, 3, 1] == 0.0)

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ValueError):
            MultiHeadSelfAttention(make_rng(0), 10, 3)


class TestBilinearSample:
    def test_on_grid(self):
        rng = make_rng(6)
        f = rng.normal(size=(5, 6, 3))
        out = bilinear_sample(t64(f), np.array([[2.0, 3.0]])).data
        assert np.array_equal(out[0], f[3, 2])

    def test_midpoint(self):
        f = np.zeros((2, 3, 1))
        f[0, 0, 0] = 1.0
        f[0, 1, 0] = 3.0
        out = bilinear_sample(t64(f), np.array([[0.5, 0.0]])).data
        assert np.isclose(out[0, 0], 2.0)

    def test_out_of_bounds_zero(self):
        rng = make_rng(7)
        f = rng.normal(size=(4, 4, 5))
        out = bilinear_sample(t64(f), np.array([[-10.0, -10.0]])).data
        assert np.array_equal(out[0], np.zeros(5))

    def test_all_on_grid_points_exact(self):
        rng = make_rng(8)
        f = rng.normal(size=(4, 5, 2))
        pts = [[x, y] for y in range(4) for x in range(5)]
        out = bilinear_sample(t64(f), np.array(pts, dtype=np.float64)).data
        assert np.array_equal(out.reshape(4, 5, 2), f)


class TestTopK:
    def test_basic(self):
        assert top_k(np.array([0.1, 0.9, 0.5]), 2) == [1, 2]

    def test_tie_break_lower_index(self):
        assert top_k(np.array([0.9, 0.9]), 1) == [0]

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            top_k(np.array([1.0, 2.0]), 3)

    def test_against_sort_oracle(self):
        rng = make_rng(9)
        scores = rng.normal(size=64)
        got = top_k(scores, 8)
        oracle = sorted(range(64), key=lambda i: (-scores[i], i))[:8]
        assert got == oracle

    def test_thousand_random_with_duplicates(self):
        rng = make_rng(10)
        for _ in range(1000):
            n = int(rng.integers(1, 20))
            scores = rng.integers(0, 5, size=n).astype(np.float64)
            k = int(rng.integers(1, n + 1))
            oracle = sorted(range(n), key=lambda i: (-scores[i], i))[:k]
            assert top_k(scores, k) == oracle


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        grads = backward(x.sum())
        assert np.array_equal(grads[x], np.ones((2, 3)))

    def test_matmul_grad_structure(self):
        rng = make_rng(11)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        grads = backward(matmul(a, b).sum())
        ones = np.ones((3, 2))
        assert np.allclose(grads[a], ones @ b.data.T)
        assert np.allclose(grads[b], a.data.T @ ones)
        err = grad_check(lambda x, y: matmul(x, y).sum(),
                         [Tensor(a.data.copy()), Tensor(b.data.copy())])
        assert err < 1e-9

    def test_detached_absent(self):
        x = Tensor(np.ones(3), requires_grad=True)
        d = x.detach()
        grads = backward((x * 2.0).sum() + d.sum())
        assert x in grads
        assert d not in grads

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(AutogradError):
            backward(x * 2.0)


class TestGradCheck:
    def test_square(self):
        x = Tensor(np.array([3.0]))
        assert grad_check(lambda t: (t * t).sum(), [x]) < 1e-9

    def test_softmax_matmul_composition(self):
        rng = make_rng(12)
        a = Tensor(rng.normal(size=(3, 4)))
        b = Tensor(rng.normal(size=(4, 3)))
        coeffs = Tensor(rng.normal(size=(3, 3)))

        def f(x, y):
            return (softmax(matmul(x, y), axis=1) * coeffs).sum()

        assert grad_check(f, [a, b]) < 1e-6

    def test_every_kernel_under_1e5(self):
        rng = make_rng(13)
        checks = []
        x = Tensor(rng.normal(size=(4, 6)))
        checks.append(grad_check(lambda t: softmax(t, axis=1).sum(axis=0)[2], [x]))
        g = Tensor(rng.normal(size=6))
        b = Tensor(rng.normal(size=6))
        checks.append(grad_check(
            lambda t, gg, bb: (layer_norm(t, gg, bb) ** 2).sum(),
            [Tensor(rng.normal(size=(3, 6))), g, b]))
        f = Tensor(rng.normal(size=(5, 5, 2)))
        p = Tensor(rng.uniform(0.3, 3.7, size=(7, 2)))
        checks.append(grad_check(
            lambda ff, pp: (bilinear_sample(ff, pp) ** 2).sum(), [f, p]))
        checks.append(grad_check(
            lambda t: (t.sigmoid() * t.gelu() + t.relu() - t.tanh()).sum(),
            [Tensor(rng.normal(size=8) + 0.05)]))
        assert max(checks) <= 1e-5


class TestAttentionMask:
    def test_fully_blocked_row_rejected(self):
        allow = np.ones((3, 3), dtype=bool)
        allow[1, :] = False
        with pytest.raises(ValueError):
            AttentionMask(allow)

    def test_full_mask(self):
        m = AttentionMask.full(4)
        assert m.shape == (4, 4)
        assert m.allow.all()


class TestFiniteGuard:
    def test_non_finite_raises(self):
        x = Tensor(np.array([1.0, 0.0]))
        with pytest.raises(FloatingPointError):
            _ = x.log() * 0.0  # log(0) = -inf

    def test_concat_backward(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones((4, 3)), requires_grad=True)
        grads = backward((concat([a, b], axis=0) * 2.0).sum())
        assert grads[a].shape == (2, 3)
        assert grads[b].shape == (4, 3)
