import numpy as np
import pytest

from depmil import autograd as ag
from depmil.gradcheck import (
    COMPOSITE_CASES,
    OP_CASES,
    CheckResult,
    _module_case,
    _op_case,
    check,
    numeric_grad,
    run_case,
    run_suite,
)
from depmil.nn import Linear


def wrong_tanh(x):
    # forward is right, backward forgets the chain factor
    y = np.tanh(x.data)
    return ag._result(y, (x,), lambda g: (g,), "tanh")


class TestPrimitives:
    def test_numeric_grad_of_quadratic(self, rng):
        a = rng.standard_normal(5)
        num = numeric_grad(lambda: float(np.sum(a ** 2)), a)
        np.testing.assert_allclose(num, 2 * a, atol=1e-8)

    def test_numeric_grad_restores_input(self, rng):
        a = rng.standard_normal((3, 2))
        before = a.copy()
        numeric_grad(lambda: float(np.sum(np.sin(a))), a)
        np.testing.assert_array_equal(a, before)

    def test_check_correct_op(self, rng):
        assert check(lambda ts: ag.tanh(ts[0]), [rng.standard_normal((3, 4))], rng) < 1e-8

    def test_check_catches_wrong_backward(self, rng):
        assert check(lambda ts: wrong_tanh(ts[0]), [rng.standard_normal((3, 4))], rng) > 1e-2

    def test_directional_catches_wrong_backward(self, rng):
        err = check(lambda ts: wrong_tanh(ts[0]), [rng.standard_normal((3, 4))], rng, directional=True)
        assert err > 1e-2


class TestCases:
    def test_every_op_family_covered(self):
        for name in ("matmul", "softmax", "layer_norm", "cross_entropy_mean", "conv2d", "concat", "split"):
            assert name in OP_CASES
        for name in ("MultiHeadSelfAttention", "TransformerEncoder", "MIL_transformer", "MIL_max"):
            assert name in COMPOSITE_CASES

    def test_injected_bug_fails_suite_case(self):
        case = _op_case(lambda ts: wrong_tanh(ts[0]), lambda rng: [rng.uniform(-2, 2, (2, 3))])
        res = run_case("bad_tanh", case, "op", trials=3, seed=0)
        assert not res.passed and res.line().startswith("FAIL")

    def test_injected_bug_in_module(self):
        class BadLinear(Linear):
            def __call__(self, x):
                return wrong_tanh(super().__call__(x))

        case = _module_case(lambda rng: BadLinear(3, 2, rng), [(4, 3)], lambda m, ts: m(ts[0]))
        assert not run_case("bad_linear", case, "composite", trials=3, seed=0).passed

    @pytest.mark.parametrize("name", ["add", "matmul_batched", "softmax", "layer_norm",
                                      "cross_entropy_sum_ignore", "conv2d", "dropout"])
    def test_op_subset(self, name):
        res = run_suite(trials=5, names=[name])
        assert len(res) == 1 and res[0].passed, res[0].line()

    @pytest.mark.parametrize("name", ["MultiHeadSelfAttention", "MIL_gated_attention", "MIL_transformer"])
    def test_composite_subset(self, name):
        res = run_suite(trials=5, names=[name])
        assert res[0].passed, res[0].line()

    def test_exhaustive_composite(self):
        res = run_suite(trials=1, names=["LayerNorm"], exhaustive=True)
        assert res[0].passed

    def test_result_line(self):
        r = CheckResult("x", "op", 3, 2e-9, 1e-4, 0.5)
        assert r.passed and r.line().startswith("PASS op")
        assert "max_err=2.00e-09" in r.line()
