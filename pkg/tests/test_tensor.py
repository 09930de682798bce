import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fcvit.gradcheck import finite_diff_check
from fcvit.tensor import (
    ConvSpec,
    NonFiniteError,
    ShapeError,
    Tensor,
    conv2d,
    cross_entropy,
    div,
    exp,
    gelu,
    global_avg_pool,
    layer_norm,
    log,
    log_softmax,
    matmul,
    maxout,
    softmax,
    sqrt,
)


def brute_conv(x, w, b, stride, pad, groups):
    """Nested-loop cross-correlation, accumulated one term at a time in float64."""
    n, c, h, wd = x.shape
    co, cg, k, _ = w.shape
    (pt, pb), (pl, pr) = ((pad, pad), (pad, pad)) if isinstance(pad, int) else pad
    xp = np.zeros((n, c, h + pt + pb, wd + pl + pr))
    xp[:, :, pt:pt + h, pl:pl + wd] = x
    ho = (h + pt + pb - k) // stride + 1
    wo = (wd + pl + pr - k) // stride + 1
    og = co // groups
    y = np.zeros((n, co, ho, wo))
    for s in range(n):
        for o in range(co):
            grp = o // og
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cg):
                        for u in range(k):
                            for v in range(k):
                                acc += float(w[o, ci, u, v]) * float(xp[s, grp * cg + ci, i * stride + u, j * stride + v])
                    y[s, o, i, j] = acc + (0.0 if b is None else float(b[o]))
    return y


class TestTensor:
    def test_zero_extent_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((0, 3)))

    def test_integer_data_promoted_to_f64(self):
        assert Tensor([1, 2]).dtype == np.float64

    def test_f32_preserved(self):
        assert Tensor(np.ones(3, dtype=np.float32)).dtype == np.float32

    def test_nonfinite_result_raises(self):
        with pytest.raises(NonFiniteError):
            div(Tensor([1.0]), Tensor([0.0]))
        with pytest.raises(NonFiniteError):
            exp(Tensor([1000.0]))

    def test_grad_matches_shape_and_dtype(self):
        x = Tensor(np.ones((2, 3), dtype=np.float32), requires_grad=True)
        (x * 2.0).sum().backward()
        assert x.grad.shape == x.shape and x.grad.dtype == x.dtype
        np.testing.assert_array_equal(x.grad, 2.0)

    def test_grad_accumulates_over_shared_use(self):
        x = Tensor([3.0], requires_grad=True)
        (x * x + x).sum().backward()
        assert x.grad[0] == 7.0

    def test_backward_needs_scalar_seed(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones(3), requires_grad=True).backward()


class TestConv2d:
    def test_ones_depthwise_counts_neighbours(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        y = conv2d(x, w, None, 1, 1, 1).data[0, 0]
        expected = brute_conv(x.data, w.data, None, 1, 1, 1)[0, 0]
        np.testing.assert_array_equal(expected, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])
        np.testing.assert_array_equal(y, expected)

    def test_identity_pointwise(self, rng):
        x = Tensor(rng.standard_normal((2, 5, 4, 4)))
        y = conv2d(x, Tensor(np.eye(5)[:, :, None, None]), Tensor(np.zeros(5)))
        np.testing.assert_array_equal(y.data, x.data)

    def test_zero_input_zero_output(self, rng):
        y = conv2d(Tensor(np.zeros((1, 4, 6, 6))), Tensor(rng.standard_normal((4, 2, 3, 3))),
                   Tensor(np.zeros(4)), 1, 1, 2)
        assert not y.data.any()

    @pytest.mark.parametrize("c,co,k,s,pad,g,size", [
        (3, 4, 3, 1, 1, 1, 5),
        (4, 6, 3, 1, 1, 2, 6),
        (4, 4, 5, 1, 2, 4, 7),
        (3, 8, 7, 4, ((2, 1), (2, 1)), 1, 8),
        (6, 3, 1, 1, 0, 3, 3),
        (2, 2, 3, 2, 0, 1, 7),
    ])
    def test_matches_nested_loop_oracle(self, rng, c, co, k, s, pad, g, size):
        x = rng.standard_normal((2, c, size, size))
        w = rng.standard_normal((co, c // g, k, k))
        b = rng.standard_normal(co)
        y = conv2d(Tensor(x), Tensor(w), Tensor(b), s, pad, g)
        np.testing.assert_allclose(y.data, brute_conv(x, w, b, s, pad, g), rtol=0, atol=1e-12)

    def test_pointwise_equals_per_pixel_matmul_exactly(self, rng):
        x = rng.standard_normal((2, 7, 3, 5))
        w = rng.standard_normal((4, 7, 1, 1))
        y = conv2d(Tensor(x), Tensor(w)).data
        for i in range(3):
            for j in range(5):
                ref = matmul(Tensor(x[:, :, i, j]), Tensor(w[:, :, 0, 0].T)).data
                np.testing.assert_array_equal(y[:, :, i, j], ref)

    @given(seed=st.integers(0, 2**32 - 1), k=st.sampled_from([1, 3, 5]), g=st.sampled_from([1, 2, 4]))
    def test_linearity_bias_counted_once(self, seed, k, g):
        r = np.random.default_rng(seed)
        x, z = Tensor(r.standard_normal((1, 4, 6, 6))), Tensor(r.standard_normal((1, 4, 6, 6)))
        w, b = Tensor(r.standard_normal((4, 4 // g, k, k))), Tensor(r.standard_normal(4))
        lhs = conv2d(x + z, w, b, 1, k // 2, g).data
        rhs = conv2d(x, w, b, 1, k // 2, g).data + conv2d(z, w, b, 1, k // 2, g).data - b.data[:, None, None]
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-9)

    def test_deterministic(self, rng):
        x, w = Tensor(rng.standard_normal((2, 4, 9, 9))), Tensor(rng.standard_normal((4, 1, 5, 5)))
        assert conv2d(x, w, None, 1, 2, 4).data.tobytes() == conv2d(x, w, None, 1, 2, 4).data.tobytes()

    def test_non_integral_output_rejected(self):
        with pytest.raises(ShapeError, match="non-integral"):
            conv2d(Tensor(np.ones((1, 1, 8, 8))), Tensor(np.ones((1, 1, 3, 3))), stride=2, padding=1)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((2, 2, 1, 1))))

    def test_groups_must_divide(self):
        with pytest.raises(ShapeError):
            ConvSpec(6, 4, 3, groups=4)

    def test_spec_counts(self):
        spec = ConvSpec(2, 2, 1)
        assert spec.macs(1, 1) == 4
        assert ConvSpec(8, 8, 3, groups=8).weight_shape == (8, 1, 3, 3)

    def test_gradient(self, rng):
        x = Tensor(rng.standard_normal((2, 4, 5, 5)))
        w = Tensor(rng.standard_normal((6, 2, 3, 3)))
        b = Tensor(rng.standard_normal(6))
        probe = rng.standard_normal((2, 6, 3, 3))
        err = finite_diff_check(lambda: (conv2d(x, w, b, 2, 1, 2) * probe).sum(), [x, w, b])
        assert err < 1e-4


class TestMatmul:
    def test_identity(self):
        np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), Tensor([[1.0, 2], [3, 4]])).data, [[1, 2], [3, 4]])

    def test_forced(self):
        assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data[0, 0] == 11.0

    def test_against_elementwise_accumulation(self, rng):
        a, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
        ref = np.zeros((5, 3))
        for i in range(5):
            for j in range(3):
                ref[i, j] = math.fsum(a[i, k] * b[k, j] for k in range(4))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, ref, rtol=0, atol=1e-12)

    def test_inner_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradient(self, rng):
        a, b = Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((4, 2)))
        probe = rng.standard_normal((3, 2))
        assert finite_diff_check(lambda: (matmul(a, b) * probe).sum(), [a, b]) < 1e-4


class TestLayerNorm:
    @staticmethod
    def ln(x, gamma=1.0, beta=0.0, eps=1e-5):
        x = Tensor(np.asarray(x, dtype=np.float64))
        d = x.shape[-1]
        return layer_norm(x, Tensor(np.full(d, gamma)), Tensor(np.full(d, beta)), eps).data

    def test_constant_input(self):
        np.testing.assert_array_equal(self.ln([1.0, 1.0, 1.0]), [0, 0, 0])

    def test_closed_form(self):
        # mean 2, population std sqrt(2/3)
        expected = np.array([-1, 0, 1]) / math.sqrt(2 / 3)
        np.testing.assert_allclose(self.ln([1.0, 2.0, 3.0], eps=1e-12), expected, atol=1e-3)
        np.testing.assert_allclose(expected, [-1.2247, 0, 1.2247], atol=1e-4)

    def test_zero_gamma(self):
        np.testing.assert_array_equal(self.ln([1.0, 2.0, 3.0], gamma=0.0, beta=5.0), [5, 5, 5])

    @given(hnp.arrays(np.float64, (3, 16), elements=st.floats(-100, 100)))
    def test_normalised_moments(self, x):
        x = x[np.ptp(x, axis=1) > 1e-1]
        if len(x) == 0:
            return
        y = self.ln(x)
        assert np.abs(y.mean(axis=1)).max() < 1e-6
        var = x.var(axis=1)
        # the eps inside the root pulls the variance to var / (var + eps)
        np.testing.assert_allclose(y.var(axis=1), var / (var + 1e-5), rtol=0, atol=1e-9)
        big = var > 1.0
        assert np.all(np.abs(y.var(axis=1)[big] - 1) < 1e-5)

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))

    def test_eps_positive(self):
        with pytest.raises(ValueError):
            layer_norm(Tensor(np.ones(3)), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=0.0)

    def test_gradient_channel_axis(self, rng):
        x = Tensor(rng.standard_normal((2, 5, 3, 3)))
        g, b = Tensor(rng.standard_normal(5)), Tensor(rng.standard_normal(5))
        probe = rng.standard_normal(x.shape)
        assert finite_diff_check(lambda: (layer_norm(x, g, b, axis=1) * probe).sum(), [x, g, b]) < 1e-4


class TestGelu:
    def test_zero(self):
        assert gelu(Tensor([0.0])).data[0] == 0.0

    def test_saturation(self):
        assert abs(gelu(Tensor([10.0])).data[0] - 10.0) < 1e-6

    def test_high_precision_oracle(self):
        mpmath.mp.dps = 40
        oracle = float(0.5 * mpmath.mpf(1) * (1 + mpmath.erf(1 / mpmath.sqrt(2))))
        assert abs(oracle - 0.84134) < 1e-4
        assert abs(gelu(Tensor([1.0])).data[0] - oracle) < 1e-12

    @given(hnp.arrays(np.float64, 8, elements=st.floats(-20, 20)))
    def test_matches_math_erf(self, x):
        ref = [0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in x]
        np.testing.assert_allclose(gelu(Tensor(x)).data, ref, rtol=1e-12, atol=1e-15)

    def test_gradient(self, rng):
        x = Tensor(rng.standard_normal(20) * 2)
        assert finite_diff_check(lambda: gelu(x).sum(), [x]) < 1e-4


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_array_equal(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_stable_under_large_logits(self):
        np.testing.assert_array_equal(softmax(Tensor([1000.0, 0.0])).data, [1.0, 0.0])

    def test_direct_evaluation(self):
        e = np.exp([1.0, 2.0, 3.0])
        ref = e / e.sum()
        np.testing.assert_allclose(ref, [0.0900, 0.2447, 0.6652], atol=1e-4)
        np.testing.assert_allclose(softmax(Tensor([1.0, 2.0, 3.0])).data, ref, atol=1e-15)

    @given(hnp.arrays(np.float64, (4, 9), elements=st.floats(-500, 500)), st.floats(-1e3, 1e3))
    def test_rows_sum_to_one_and_shift_invariant(self, x, c):
        y = softmax(Tensor(x), axis=1).data
        assert np.abs(y.sum(axis=1) - 1).max() < 1e-6
        np.testing.assert_allclose(softmax(Tensor(x + c), axis=1).data, y, rtol=0, atol=1e-6)

    def test_log_softmax_consistent(self, rng):
        x = rng.standard_normal((3, 5))
        np.testing.assert_allclose(np.exp(log_softmax(Tensor(x)).data), softmax(Tensor(x)).data, atol=1e-15)

    def test_gradients(self, rng):
        x = Tensor(rng.standard_normal((3, 5)))
        probe = rng.standard_normal((3, 5))
        assert finite_diff_check(lambda: (softmax(x, axis=1) * probe).sum(), [x]) < 1e-4
        labels = np.array([0, 4, 2])
        assert finite_diff_check(lambda: cross_entropy(x, labels), [x]) < 1e-4


class TestMaxout:
    def test_idempotent(self, rng):
        a = Tensor(rng.standard_normal(5))
        np.testing.assert_array_equal(maxout(a, a).data, a.data)

    def test_forced(self):
        np.testing.assert_array_equal(maxout(Tensor([1.0, -2.0]), Tensor([0.0, 3.0])).data, [1, 3])

    def test_tie_gradient_goes_to_first(self):
        a, b = Tensor([2.0, 1.0], requires_grad=True), Tensor([2.0, 5.0], requires_grad=True)
        maxout(a, b).sum().backward()
        np.testing.assert_array_equal(a.grad, [1, 0])
        np.testing.assert_array_equal(b.grad, [0, 1])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            maxout(Tensor(np.ones(2)), Tensor(np.ones(3)))

    def test_gradient_off_ties(self, rng):
        a, b = Tensor(rng.standard_normal(30)), Tensor(rng.standard_normal(30))
        assert finite_diff_check(lambda: (maxout(a, b) ** 2).sum(), [a, b]) < 1e-4


class TestGlobalAvgPool:
    def test_constant(self):
        np.testing.assert_array_equal(global_avg_pool(Tensor(np.full((1, 2, 3, 3), 1.5))).data, [[1.5, 1.5]])

    def test_symmetric(self):
        assert global_avg_pool(Tensor([[[[1.0, 3.0], [3.0, 1.0]]]])).data[0, 0] == 2.0

    def test_permutation_invariant(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        perm = rng.permutation(16)
        xp = x.reshape(2, 3, 16)[:, :, perm].reshape(2, 3, 4, 4)
        np.testing.assert_allclose(global_avg_pool(Tensor(xp)).data, global_avg_pool(Tensor(x)).data,
                                   rtol=0, atol=1e-15)


class TestFiniteDiffCheck:
    def test_quadratic(self):
        x = Tensor([1.0, 2.0, 3.0])
        assert finite_diff_check(lambda: (x * x).sum(), [x], n_coords=3) < 1e-8
        np.testing.assert_array_equal(x.grad, [2, 4, 6])

    def test_constant(self):
        x = Tensor([1.0, 2.0])
        assert finite_diff_check(lambda: Tensor(4.0) + x.sum() * 0.0, [x]) == 0.0

    def test_detects_wrong_gradient(self):
        from fcvit.tensor import _result

        x = Tensor([1.0, 2.0])

        def bad_square(t):
            return _result(t.data ** 2, (t,), lambda g: (g * t.data,), "bad")  # missing factor 2

        assert finite_diff_check(lambda: bad_square(x).sum(), [x]) > 0.1

    def test_float32_rejected(self):
        x = Tensor(np.ones(2, dtype=np.float32))
        with pytest.raises(TypeError):
            finite_diff_check(lambda: x.sum(), [x])

    def test_nonfinite_loss(self):
        x = Tensor([1e-300])
        with pytest.raises(NonFiniteError):
            finite_diff_check(lambda: log(x * x).sum(), [x])

    def test_elementwise_kernels(self, rng):
        a = Tensor(rng.uniform(0.5, 2.0, 6))
        b = Tensor(rng.uniform(0.5, 2.0, 6))
        f = lambda: (div(a, b) + sqrt(a) * exp(b * 0.1) + log(a) - (a - b) ** 3).sum()  # noqa: E731
        assert finite_diff_check(f, [a, b]) < 1e-4

    def test_reductions_and_reshapes(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4)))
        probe = rng.standard_normal((4, 3))
        f = lambda: (x.mean(axis=0).T * probe).sum() + x.reshape(6, 4).transpose(1, 0).sum()  # noqa: E731
        assert finite_diff_check(f, [x]) < 1e-4

    def test_global_avg_pool_gradient(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 4)))
        probe = rng.standard_normal((2, 3))
        assert finite_diff_check(lambda: (global_avg_pool(x) * probe).sum(), [x]) < 1e-4
