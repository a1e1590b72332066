import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from depmil import autograd as ag
from depmil.autograd import DomainError, ShapeError, Tensor
from depmil.gradcheck import numeric_grad

finite = st.floats(-50, 50, allow_nan=False, width=64)


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(ag.matmul(a, b).data, [[1, 2], [3, 4]])

    def test_manual_product(self):
        out = ag.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        np.testing.assert_array_equal(out.data, [[17], [39]])

    def test_grad_of_sum_is_ones_times_bT(self, rng):
        a, b = leaf(rng.uniform(-2, 2, (3, 4))), leaf(rng.uniform(-2, 2, (4, 2)))
        ag.matmul(a, b).sum().backward()
        np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T)

        def f():
            return float((a.data @ b.data).sum())

        num = numeric_grad(f, a.data)
        assert np.max(np.abs(num - a.grad)) / np.max(np.abs(num)) < 1e-4

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(ag.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)

    def test_large_logits_do_not_overflow(self):
        out = ag.softmax(Tensor(np.array([1000.0, 0.0]))).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)

    def test_log_values(self):
        out = ag.softmax(Tensor(np.log([1.0, 2.0, 3.0]))).data
        np.testing.assert_allclose(out, [1 / 6, 2 / 6, 3 / 6], rtol=1e-12)

    @given(arrays(np.float64, (3, 5), elements=finite))
    @settings(max_examples=60, deadline=None)
    def test_rows_sum_to_one_and_positive(self, x):
        out = ag.softmax(Tensor(x), axis=-1).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(out >= 0)


class TestElementwise:
    def test_fixed_points(self):
        assert ag.sigmoid(Tensor([0.0])).data[0] == 0.5
        assert ag.tanh(Tensor([0.0])).data[0] == 0.0

    def test_sigmoid_slope_at_zero(self):
        x = leaf([0.0])
        ag.sigmoid(x).sum().backward()
        num = numeric_grad(lambda: float(1 / (1 + np.exp(-x.data[0]))), x.data)
        assert x.grad[0] == pytest.approx(0.25)
        assert abs(num[0] - 0.25) / 0.25 < 1e-6

    def test_sigmoid_extreme_inputs_finite(self):
        out = ag.sigmoid(Tensor(np.array([-1000.0, 1000.0]))).data
        np.testing.assert_array_equal(out, [0.0, 1.0])

    def test_log_domain(self):
        with pytest.raises(DomainError):
            ag.log(Tensor([1.0, 0.0]))
        with pytest.raises(DomainError):
            ag.log(Tensor([-1.0]))

    def test_relu_grad_mask(self):
        x = leaf([-1.0, 2.0])
        ag.relu(x).sum().backward()
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_mul_requires_equal_shapes(self):
        with pytest.raises(ShapeError):
            ag.mul(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


class TestPoolAndConcat:
    def test_mean_pool(self):
        np.testing.assert_array_equal(ag.mean_pool(Tensor([[2.0, 4.0]]), axis=1).data, [3.0])

    def test_constant_pools_to_constant(self):
        out = ag.mean_pool(Tensor(np.full((2, 3, 4), 7.5)), axis=(1, 2))
        np.testing.assert_array_equal(out.data, [7.5, 7.5])

    def test_mean_grad_is_one_over_n(self):
        x = leaf(np.ones((2, 5)))
        ag.mean_pool(x, axis=1).sum().backward()
        np.testing.assert_allclose(x.grad, np.full((2, 5), 0.2))

    def test_empty_reduction_rejected(self):
        with pytest.raises(ShapeError):
            ag.mean_pool(Tensor(np.ones((2, 3))), axis=())

    def test_concat(self):
        np.testing.assert_array_equal(ag.concat([Tensor([[1.0]]), Tensor([[2.0]])], axis=1).data, [[1, 2]])

    def test_concat_single_is_identity(self):
        t = Tensor([[1.0, 2.0]])
        assert ag.concat([t], axis=0) is t

    def test_split_inverts_concat(self, rng):
        a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 4))
        parts = ag.split(ag.concat([Tensor(a), Tensor(b)], axis=1), [3, 4], axis=1)
        np.testing.assert_array_equal(parts[0].data, a)
        np.testing.assert_array_equal(parts[1].data, b)

    def test_concat_mismatch(self):
        with pytest.raises(ShapeError):
            ag.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=1)


class TestCrossEntropy:
    def test_confident_correct(self):
        assert ag.cross_entropy(Tensor([[10.0, -10.0]]), [0]).item() == pytest.approx(0.0, abs=1e-8)

    @pytest.mark.parametrize("target", range(5))
    def test_uniform_is_log_c(self, target):
        loss = ag.cross_entropy(Tensor(np.zeros((1, 5))), [target]).item()
        assert loss == pytest.approx(math.log(5), rel=1e-6)

    def test_ignored_row_sum(self, rng):
        logits = rng.standard_normal((2, 3))
        both = ag.cross_entropy(Tensor(logits), [1, -1], reduction="sum", ignore_label=-1).item()
        one = ag.cross_entropy(Tensor(logits[:1]), [1], reduction="sum").item()
        assert both == pytest.approx(one, rel=1e-6)

    def test_ignored_row_left_out_of_mean(self, rng):
        logits = rng.standard_normal((3, 3))
        got = ag.cross_entropy(Tensor(logits), [0, -1, 2], ignore_label=-1).item()
        want = ag.cross_entropy(Tensor(logits[[0, 2]]), [0, 2]).item()
        assert got == pytest.approx(want, rel=1e-6)

    def test_all_ignored_is_zero_with_zero_grad(self):
        x = leaf(np.ones((2, 3)))
        loss = ag.cross_entropy(x, [-1, -1], ignore_label=-1)
        loss.backward()
        assert loss.item() == 0.0
        np.testing.assert_array_equal(x.grad, 0.0)

    def test_target_out_of_range(self):
        with pytest.raises(ValueError):
            ag.cross_entropy(Tensor(np.zeros((1, 3))), [3])

    @given(arrays(np.float64, (4, 3), elements=finite), st.lists(st.integers(0, 2), min_size=4, max_size=4))
    @settings(max_examples=60, deadline=None)
    def test_nonnegative(self, logits, targets):
        assert ag.cross_entropy(Tensor(logits), targets).item() >= 0.0


class TestBackward:
    def test_sum_grad_is_ones(self):
        x = leaf([1.0, 2.0, 3.0])
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, [1, 1, 1])

    def test_square(self):
        x = leaf([1.0, 2.0])
        ag.mul(x, x).sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_accumulates(self, rng):
        x = leaf(rng.standard_normal(4))
        ag.tanh(x).sum().backward()
        first = x.grad.copy()
        ag.tanh(x).sum().backward()
        np.testing.assert_array_equal(x.grad, 2 * first)

    def test_non_scalar_loss(self):
        with pytest.raises(ShapeError):
            leaf([1.0, 2.0]).backward()

    def test_diamond_graph_visits_each_node_once(self):
        x = leaf([3.0])
        y = ag.exp(x)
        z = ag.add(ag.mul(y, y), y)  # y reached along two paths
        z.sum().backward()
        e = math.exp(3.0)
        assert x.grad[0] == pytest.approx(2 * e * e + e)

    def test_no_grad_builds_no_graph(self):
        x = leaf([1.0])
        with ag.no_grad():
            y = ag.tanh(x)
        assert not y.requires_grad

    def test_replay_is_bit_identical(self, rng):
        x = rng.standard_normal((4, 6))
        w = rng.standard_normal((3, 6))

        def run():
            return ag.layer_norm(ag.linear(Tensor(x), Tensor(w)), None, None).data

        np.testing.assert_array_equal(run(), run())


class TestLayerNormOp:
    def test_constant_row_is_zero(self):
        out = ag.layer_norm(Tensor(np.full((1, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_two_element_row(self):
        out = ag.layer_norm(Tensor([[1.0, -1.0]]), None, None, eps=1e-5).data
        np.testing.assert_allclose(out, np.array([[1.0, -1.0]]) / math.sqrt(1 + 1e-5), rtol=1e-12)

    def test_standardises_rows(self, rng):
        out = ag.layer_norm(Tensor(rng.uniform(-3, 3, (20, 16))), None, None).data
        assert np.max(np.abs(out.mean(axis=1))) < 1e-6
        np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-4)


class TestConv:
    def test_matches_direct_loop(self, rng):
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        out = ag.conv2d(Tensor(x), Tensor(w), None, stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        want = np.zeros((1, 3, 3, 3))
        for o in range(3):
            for i in range(3):
                for j in range(3):
                    want[0, o, i, j] = np.sum(xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o])
        np.testing.assert_allclose(out, want, rtol=1e-12)
