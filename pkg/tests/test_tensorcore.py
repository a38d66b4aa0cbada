import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semmatch import tensorcore as tc
from semmatch.tensorcore import Tensor

from gradcheck import check_tensors, numeric_grad, rel_error


def leaf(values, dtype=np.float64):
    return Tensor(np.array(values, dtype=dtype), requires_grad=True, dtype=dtype)


class TestForward:
    def test_relu(self):
        np.testing.assert_array_equal(tc.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_l2_normalize(self):
        np.testing.assert_allclose(tc.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8], rtol=1e-6)

    def test_l2_normalize_zero_vector_stays_zero(self):
        np.testing.assert_array_equal(tc.l2_normalize(Tensor(np.zeros((2, 3))), axis=1).data, 0)

    def test_matmul_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))
        expected = np.zeros((2, 2))
        for i in range(2):
            for j in range(2):
                for k in range(3):
                    expected[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose(tc.matmul(Tensor(a), Tensor(b)).data, expected, rtol=1e-6)

    def test_default_dtype_is_float32(self):
        assert Tensor([1.0, 2.0]).dtype == np.float32
        assert tc.add(Tensor([1.0]), 2.0).dtype == np.float32

    def test_max_reduce_and_sum(self):
        x = Tensor(np.array([[1.0, 5.0, 5.0], [2.0, 0.0, -1.0]]))
        np.testing.assert_array_equal(tc.max_reduce(x, axis=1).data, [5, 2])
        assert tc.sum_reduce(x).item() == pytest.approx(12.0)
        assert tc.max_reduce(x).item() == 5.0

    def test_gather_and_concat(self):
        x = Tensor(np.arange(6.0).reshape(3, 2))
        np.testing.assert_array_equal(tc.gather(x, np.array([2, 0])).data, [[4, 5], [0, 1]])
        np.testing.assert_array_equal(tc.concat([x, x], axis=1).shape, (3, 4))

    def test_tps_kernel_values(self):
        r2 = np.array([0.0, 1.0, 4.0])
        np.testing.assert_allclose(tc.tps_kernel(Tensor(r2, dtype=np.float64)).data, [0, 0, 4 * np.log(4)])


class TestErrors:
    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(tc.ShapeError, match=r"\(2, 3\).*\(4,\)"):
            tc.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)))

    def test_matmul_mismatch(self):
        with pytest.raises(tc.ShapeError, match="matmul"):
            tc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_non_finite_is_numeric_error(self):
        with pytest.raises(tc.NumericError):
            tc.div(Tensor([1.0]), Tensor([0.0]))

    def test_backward_needs_scalar(self):
        x = leaf([1.0, 2.0])
        with pytest.raises(tc.ShapeError, match="scalar"):
            tc.backward(tc.mul(x, 2.0))

    def test_bad_reshape(self):
        with pytest.raises(tc.ShapeError):
            tc.reshape(Tensor(np.zeros(6)), (4,))


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = leaf([1.0, -2.0, 3.0])
        tc.backward(tc.sum_reduce(x))
        np.testing.assert_array_equal(x.grad, [1, 1, 1])

    def test_relu_subgradient(self):
        x = leaf([-1.0, 2.0])
        tc.backward(tc.sum_reduce(tc.relu(x)))
        np.testing.assert_array_equal(x.grad, [0, 1])

    def test_max_ties_route_to_first_index(self):
        x = leaf([[1.0, 3.0, 3.0]])
        tc.backward(tc.sum_reduce(tc.max_reduce(x, axis=1)))
        np.testing.assert_array_equal(x.grad, [[0, 1, 0]])

    def test_reused_leaf_accumulates_each_use(self):
        x = leaf([2.0])
        tc.backward(tc.sum_reduce(tc.add(tc.mul(x, x), x)))
        np.testing.assert_allclose(x.grad, [5.0])

    def test_no_grad_inputs_record_nothing(self):
        y = tc.mul(Tensor([1.0]), 3.0)
        assert not y.requires_grad and y._backward is None

    def test_norm_gradient_at_zero_is_zero(self):
        x = leaf([[0.0, 0.0]])
        tc.backward(tc.sum_reduce(tc.norm(x, axis=1)))
        np.testing.assert_array_equal(x.grad, [[0, 0]])

    def test_tps_kernel_composite_gradient_at_origin(self):
        x = leaf([0.0, 0.0])
        tc.backward(tc.tps_kernel(tc.sum_reduce(tc.square(x))))
        np.testing.assert_array_equal(x.grad, [0, 0])


def _composite(x: Tensor) -> Tensor:
    """Touches every differentiable op in the suite."""
    m = tc.reshape(x, (2, 2))
    a = tc.matmul(m, tc.transpose(m))
    b = tc.relu(tc.add(a, 0.1))
    c = tc.l2_normalize(b, axis=1)
    d = tc.mul(c, tc.tanh(m))
    e = tc.max_reduce(tc.concat([d, tc.gather(m, np.array([1, 0]))], axis=1), axis=1)
    f = tc.div(tc.sum_reduce(e), tc.add(tc.sum_reduce(tc.square(x)), 1.0))
    g = tc.sqrt(tc.add(tc.norm(m, axis=0), 0.5))
    h = tc.tps_kernel(tc.add(tc.square(x), 0.2))
    return tc.add(tc.add(tc.sub(f, tc.mean_reduce(g)), tc.sum_reduce(h)), tc.neg(tc.sum_reduce(tc.mul(x, 0.3))))


class TestGradientOracle:
    def _draw(self, seed, n=4):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-1, 1, n)
        while np.any(np.abs(x) < 1e-2):
            x = rng.uniform(-1, 1, n)
        return x

    def test_composite_step_1e3(self):
        x = leaf(self._draw(0))
        assert check_tensors(lambda: _composite(x), [x], step=1e-3) < 1e-4

    @pytest.mark.parametrize("seed", range(20))
    def test_composite_random_seeds(self, seed):
        x = leaf(self._draw(seed))
        assert check_tensors(lambda: _composite(x), [x], step=1e-6) < 1e-4

    @pytest.mark.parametrize("op", [
        lambda a, b: tc.sum_reduce(tc.add(a, b)),
        lambda a, b: tc.sum_reduce(tc.sub(a, b)),
        lambda a, b: tc.sum_reduce(tc.mul(a, b)),
        lambda a, b: tc.sum_reduce(tc.div(a, tc.add(tc.square(b), 1.0))),
        lambda a, b: tc.sum_reduce(tc.matmul(tc.reshape(a, (2, 3)), tc.reshape(b, (3, 2)))),
        lambda a, b: tc.sum_reduce(tc.mul(tc.l2_normalize(tc.reshape(a, (3, 2)), axis=1), tc.reshape(b, (3, 2)))),
        lambda a, b: tc.sum_reduce(tc.mul(tc.max_reduce(tc.reshape(a, (2, 3)), axis=0), tc.gather(b, np.array([0, 3, 5])))),
        lambda a, b: tc.sum_reduce(tc.mul(tc.relu(a), tc.tanh(b))),
        lambda a, b: tc.sum_reduce(tc.norm(tc.reshape(tc.sub(a, b), (3, 2)), axis=1)),
    ])
    @pytest.mark.parametrize("seed", range(3))
    def test_binary_ops(self, op, seed):
        x = leaf(self._draw(seed, 6))
        y = leaf(self._draw(seed + 100, 6))
        assert check_tensors(lambda: op(x, y), [x, y]) < 1e-4

    def test_broadcast_gradient_sums_over_broadcast_axes(self):
        a = leaf(np.ones((3, 1, 2)))
        b = leaf(np.arange(8.0).reshape(4, 2))
        tc.backward(tc.sum_reduce(tc.mul(a, b)))
        assert a.grad.shape == (3, 1, 2) and b.grad.shape == (4, 2)
        np.testing.assert_allclose(a.grad[0, 0], b.data.sum(axis=0))
        np.testing.assert_allclose(b.grad, 3.0)

    def test_float32_tape_agrees_with_float64_differences(self):
        x64 = self._draw(7)
        x32 = leaf(x64, dtype=np.float32)
        tc.backward(_composite(x32))
        arr = x64.copy()
        num = numeric_grad(lambda: float(_composite(Tensor(arr, dtype=np.float64)).data), [arr])[0]
        assert rel_error(x32.grad, num) < 1e-4


def test_backward_is_deterministic():
    rng = np.random.default_rng(3)
    vals = rng.uniform(-1, 1, 4)
    grads = []
    for _ in range(2):
        x = leaf(vals, dtype=np.float32)
        tc.backward(_composite(x))
        grads.append(x.grad.tobytes())
    assert grads[0] == grads[1]


@settings(max_examples=50, deadline=None)
@given(st.sampled_from([(2, 6), (3, 4), (12,), (4, 3), (1, 12)]),
       st.sampled_from([(6, 2), (12, 1), (2, 2, 3)]))
def test_reshape_roundtrip(s1, s2):
    x = Tensor(np.random.default_rng(0).normal(size=s1))
    back = tc.reshape(tc.reshape(x, s2), s1)
    np.testing.assert_array_equal(back.data, x.data)
