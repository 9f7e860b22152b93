import numpy as np
import pytest

from e2caps import ops, suite
from e2caps.gradcheck import GradCheckError, grad_check, relative_error
from e2caps.tensor import Tensor, make_node


def t64(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def test_linear_small_weights(rng):
    x, w, b = (t64(rng.standard_normal(s) * 0.1) for s in [(5,), (3, 5), (3,)])
    assert grad_check(ops.linear, [x, w, b], eps=1e-5) < 1e-6


def test_relu_away_from_kink(rng):
    x = rng.uniform(0.1, 2.0, 20) * rng.choice([-1, 1], 20)
    assert grad_check(ops.relu, [t64(x)], eps=1e-5) < 1e-6


def test_constant_op_is_exact():
    assert grad_check(lambda x: ops.mul(x, 0.0), [t64(np.zeros(4))], eps=1e-5) == 0.0


def test_rejects_float32():
    with pytest.raises(GradCheckError):
        grad_check(ops.relu, [Tensor(np.ones(3, dtype=np.float32))])


@pytest.mark.parametrize("eps", [1e-8, 1e-2])
def test_rejects_eps_out_of_range(eps):
    with pytest.raises(GradCheckError):
        grad_check(ops.relu, [t64(np.ones(3))], eps=eps)


def test_rejects_non_finite():
    with pytest.raises(GradCheckError):
        grad_check(ops.relu, [t64([1.0, np.nan])])


def test_relative_error_definition():
    assert relative_error(1.0, 1.0) == 0
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)
    assert relative_error(0.0, 0.0) == 0


def test_detects_wrong_backward(rng):
    def bad_square(x):
        return make_node(x.data ** 2, (x,), lambda g: (g * x.data,))  # missing factor 2
    assert grad_check(bad_square, [t64(rng.standard_normal(4))]) > 0.1


def test_kink_coordinates_are_skipped():
    # every probe of x=0 flips the relu branch, so there is nothing left to check
    with pytest.raises(GradCheckError, match="kink"):
        grad_check(ops.relu, [t64([0.0])], eps=1e-6)


def test_restores_requires_grad(rng):
    x = t64(rng.standard_normal(3))
    grad_check(ops.exp, [x])
    assert not x.requires_grad and x.grad is None


@pytest.mark.parametrize("seed", range(10))
def test_suite_all_ops_under_tolerance(seed):
    results = suite.gradcheck_suite(seed)
    bad = [(n, e) for n, e in results if not e < suite.TOLERANCE]
    assert not bad, bad


def test_suite_covers_model_and_capsule_ops():
    names = [c[0] for c in suite.cases(0)]
    for op in ("conv2d pad1", "maxpool2", "squash", "dynamic_routing (3 iters)",
               "fuse_attention", "margin_loss", "E2Capsnet toy end-to-end"):
        assert op in names
