import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from e2caps import _kernels
from e2caps.optim import Adam, AdamState, NonFiniteGradient, adam_step
from e2caps.tensor import Tensor


def params(rng, dtype=np.float64):
    return {"w": Tensor(rng.standard_normal((3, 4)).astype(dtype), requires_grad=True),
            "b": Tensor(rng.standard_normal(4).astype(dtype), requires_grad=True)}


def reference_adam(p, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook loop, one step per gradient."""
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_zero_gradient_is_fixed_point(rng):
    ps = params(rng)
    before = {k: v.data.copy() for k, v in ps.items()}
    state = AdamState(lr=0.1)
    for _ in range(3):
        adam_step(ps, {k: np.zeros_like(v.data) for k, v in ps.items()}, state)
    for k in ps:
        np.testing.assert_array_equal(ps[k].data, before[k])
    assert state.step == 3


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 1e3) | st.floats(-1e3, -1e-3), st.floats(1e-5, 1e-1))
def test_first_step_is_lr_times_sign(g, lr):
    p = {"x": Tensor(np.array([0.7]), requires_grad=True)}
    adam_step(p, {"x": np.array([g])}, AdamState(lr=lr))
    step = p["x"].data[0] - 0.7
    # closed form: -lr * g / (|g| + eps)
    assert abs(step + lr * np.sign(g)) <= lr * 1e-8 / abs(g) + 1e-15


def test_matches_reference_over_steps(rng):
    p0 = rng.standard_normal(6)
    grads = [rng.standard_normal(6) for _ in range(7)]
    ps = {"p": Tensor(p0.copy(), requires_grad=True)}
    state = AdamState(lr=1e-3)
    for g in grads:
        adam_step(ps, {"p": g}, state)
    np.testing.assert_allclose(ps["p"].data, reference_adam(p0, grads), rtol=1e-12, atol=1e-15)


def test_step_counter_increments_by_one(rng):
    ps = params(rng)
    state = AdamState()
    for k in range(1, 5):
        adam_step(ps, {"w": rng.standard_normal((3, 4))}, state)
        assert state.step == k


def test_non_finite_gradient_names_parameter(rng):
    ps = params(rng)
    g = np.zeros(4)
    g[1] = np.inf
    with pytest.raises(NonFiniteGradient, match="'b'"):
        adam_step(ps, {"b": g}, AdamState())


def test_shape_mismatch(rng):
    with pytest.raises(ValueError):
        adam_step(params(rng), {"b": np.zeros(5)}, AdamState())


def test_two_runs_bit_identical():
    def run():
        rng = np.random.Generator(np.random.PCG64(5))
        opt = Adam(params(rng, np.float32), lr=1e-2)
        for _ in range(10):
            for p in opt.params.values():
                p.grad = rng.standard_normal(p.shape).astype(np.float32)
            opt.step()
        return {k: v.data.tobytes() for k, v in opt.params.items()}
    assert run() == run()


@pytest.mark.skipif(_kernels.numba_kernels is None, reason="numba unavailable")
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_numba_and_numpy_kernels_agree(rng, dtype):
    outs = []
    for k in (_kernels.numpy_kernels, _kernels.numba_kernels):
        p = rng.standard_normal(50).astype(dtype)
        m = np.zeros_like(p)
        v = np.zeros_like(p)
        r = np.random.Generator(np.random.PCG64(0))
        for t in range(1, 6):
            g = r.standard_normal(50).astype(dtype)
            k.adam(p, g, m, v, dtype(1e-3), dtype(0.9), dtype(0.999), dtype(1e-8),
                   dtype(1 - 0.9 ** t), dtype(1 - 0.999 ** t))
        outs.append(p)
        rng = np.random.Generator(np.random.PCG64(1234))
    np.testing.assert_array_equal(outs[0], outs[1])
