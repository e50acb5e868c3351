import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from golo import tensor as T
from golo.errors import AxisError, ContractError, EvaluationError, ShapeError
from golo.checks import OP_CASES
from golo.tensor import Tensor, finite_diff_check, precision


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.arange(6.0).reshape(2, 3))
        np.testing.assert_array_equal(T.matmul(a, Tensor(np.eye(3))).data, a.data)

    def test_hand_case(self):
        out = Tensor([[1, 2], [3, 4]]) @ Tensor([[5, 6], [7, 8]])
        np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    def test_batch_broadcast(self):
        a = Tensor(np.ones((5, 2, 3)))
        b = Tensor(np.ones((3, 4)))
        assert (a @ b).shape == (5, 2, 4)

    def test_vector_operands(self):
        x = Tensor([1.0, 1.0])
        w = Tensor([[1.0], [2.0]])
        assert (x @ w).shape == (1,)

    @pytest.mark.parametrize("dtype,tol", [("float32", 1e-4), ("float64", 1e-10)])
    def test_associativity(self, dtype, tol):
        rng = np.random.default_rng(0)
        with precision(dtype):
            for _ in range(20):
                a, b, c = (Tensor(rng.uniform(-1, 1, s)) for s in [(3, 4), (4, 5), (5, 2)])
                left = ((a @ b) @ c).data
                right = (a @ (b @ c)).data
                np.testing.assert_allclose(left, right, atol=tol)


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0]), 0).data, [0.5, 0.5])

    def test_no_overflow(self):
        out = T.softmax(Tensor([1000.0, 0.0]), 0).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-7)

    def test_log_weights(self):
        out = T.softmax(Tensor(np.log([1.0, 2.0, 3.0])), 0).data
        np.testing.assert_allclose(out, [1 / 6, 2 / 6, 3 / 6], atol=1e-6)

    def test_bad_axis(self):
        with pytest.raises(AxisError):
            T.softmax(Tensor(np.ones((2, 2))), 2)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 6))
    def test_slices_sum_to_one(self, seed, rows, cols):
        x = np.random.default_rng(seed).uniform(-50, 50, size=(rows, cols))
        for axis in (0, 1):
            out = T.softmax(Tensor(x), axis).data
            assert np.all(out >= 0)
            np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-6)


class TestLayerNorm:
    def test_constant_slice_is_zero(self):
        out = T.layer_norm(Tensor([[4.0, 4.0, 4.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_population_variance(self):
        out = T.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-5)

    def test_zero_gain_gives_bias(self):
        x = Tensor(np.random.default_rng(1).normal(size=(4, 3)))
        out = T.layer_norm(x, Tensor(np.zeros(3)), Tensor([0.5, -1.0, 2.0]))
        np.testing.assert_array_equal(out.data, np.tile([0.5, -1.0, 2.0], (4, 1)))

    def test_normalised_moments(self):
        x = Tensor(np.random.default_rng(2).normal(3.0, 5.0, size=(6, 16)))
        out = T.layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6)), axis=0).data
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.var(axis=0), 1.0, atol=1e-5)

    def test_zero_length_axis(self):
        with pytest.raises(ShapeError):
            T.layer_norm(Tensor(np.ones((2, 0))), Tensor(np.ones(0)), Tensor(np.zeros(0)))


class TestActivationAndLinear:
    def test_relu(self):
        np.testing.assert_array_equal(T.activation(Tensor([-1.0, 0.0, 2.0]), "relu").data, [0, 0, 2])

    def test_sigmoid(self):
        assert T.activation(Tensor(0.0), "sigmoid").item() == 0.5

    def test_exp(self):
        np.testing.assert_allclose(T.activation(Tensor([0.0, 1.0]), "exp").data, [1.0, math.e], rtol=1e-6)

    def test_relu_subgradient_at_zero(self):
        x = Tensor([0.0], requires_grad=True)
        T.relu(x).sum().backward()
        assert x.grad[0] == 0.0

    def test_linear_identity(self):
        x = Tensor(np.arange(4.0).reshape(2, 2))
        np.testing.assert_array_equal(T.linear(x, Tensor(np.eye(2)), Tensor(np.zeros(2))).data, x.data)

    def test_linear_hand_case(self):
        out = T.linear(Tensor([1.0, 1.0]), Tensor([[1.0], [2.0]]), Tensor([3.0]))
        np.testing.assert_array_equal(out.data, [6.0])

    def test_linear_mismatch(self):
        with pytest.raises(ShapeError):
            T.linear(Tensor(np.ones(3)), Tensor(np.ones((2, 1))))


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 5, 5)))
        k = Tensor(np.eye(3).reshape(3, 3, 1, 1))
        np.testing.assert_allclose(T.conv2d(x, k).data, x.data, atol=1e-6)

    def test_all_ones(self):
        out = T.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
        np.testing.assert_array_equal(out.data, [[[9.0]]])

    def test_stride_two_shape(self):
        out = T.conv2d(Tensor(np.ones((2, 8, 8))), Tensor(np.ones((4, 2, 3, 3))), stride=2, pad=1)
        assert out.shape == (4, 4, 4)

    def test_kernel_too_large(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))

    def test_matches_direct_loop(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 7, 6))
        k = rng.normal(size=(3, 2, 3, 3))
        out = T.conv2d(Tensor(x), Tensor(k), stride=2, pad=1).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        for o in range(3):
            for i in range(out.shape[1]):
                for j in range(out.shape[2]):
                    ref = (xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * k[o]).sum()
                    assert out[o, i, j] == pytest.approx(ref, abs=1e-4)


class TestBackward:
    def test_sum(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, [1, 1, 1])

    def test_square(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, [2, 4])

    def test_repeated_backward_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        (x * x).sum().backward()
        (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, [4, 8])
        x.zero_grad()
        np.testing.assert_array_equal(x.grad, [0, 0])

    def test_non_scalar_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            (x * 2).backward()

    def test_unused_parameter_grad_is_zero(self):
        x = Tensor([1.0], requires_grad=True)
        unused = Tensor([5.0, 6.0], requires_grad=True)
        (x * 3).sum().backward()
        np.testing.assert_array_equal(unused.grad, [0, 0])

    def test_duplicated_input_paths_add(self):
        # f = x*x + 3x + x*y: df/dx = 2x + 3 + y summed over each use of x
        x = Tensor([2.0], requires_grad=True)
        y = Tensor([5.0], requires_grad=True)
        (x * x + 3 * x + x * y).sum().backward()
        assert x.grad[0] == pytest.approx(2 * 2 + 3 + 5)
        assert y.grad[0] == pytest.approx(2)

    def test_diamond_graph_visits_each_node_once(self):
        x = Tensor([1.5], requires_grad=True)
        h = T.exp(x)
        (h * h + h).sum().backward()
        e = math.exp(1.5)
        assert x.grad[0] == pytest.approx(2 * e * e + e, rel=1e-6)

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = x * 2
        assert not y.requires_grad

    def test_debug_mode_flags_nan(self):
        T.set_debug(True)
        try:
            with pytest.raises(EvaluationError):
                T.log(Tensor([-1.0]))
        finally:
            T.set_debug(False)


class TestFiniteDiff:
    def test_square(self):
        with precision("float64"):
            theta = Tensor([3.0], requires_grad=True)
            assert finite_diff_check(lambda: (theta * theta).sum(), [theta]) < 1e-7
            assert theta.grad[0] == pytest.approx(6.0)

    def test_constant(self):
        with precision("float64"):
            theta = Tensor([3.0], requires_grad=True)
            assert finite_diff_check(lambda: (theta * 0.0).sum(), [theta]) == 0.0

    def test_requires_float64(self):
        theta = Tensor([3.0], requires_grad=True)
        with pytest.raises(ContractError):
            finite_diff_check(lambda: theta.sum(), [theta])

    def test_non_finite(self):
        with precision("float64"):
            theta = Tensor([-1.0], requires_grad=True)
            with pytest.raises(EvaluationError):
                finite_diff_check(lambda: T.log(theta).sum(), [theta])


def _weighted(out, rng):
    w = Tensor(rng.normal(size=out.shape))
    return (out * w).sum()


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(123)
    with precision("float64"):
        params, fn = OP_CASES[name](rng)
        weights_rng = np.random.default_rng(7)
        out_shape = fn().shape
        w = Tensor(weights_rng.normal(size=out_shape))
        err = finite_diff_check(lambda: (fn() * w).sum(), params)
    assert err < 1e-6, f"{name}: {err}"
