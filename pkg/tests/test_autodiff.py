import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from pfonet import autodiff as ad
from pfonet.autodiff import AdamState, Tensor, adam_step, value_and_grad


def numeric_grad(fn, params, h=1e-6):
    out = {}
    for k, p in params.items():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            plus = {**params, k: p.copy()}
            minus = {**params, k: p.copy()}
            plus[k][idx] += h
            minus[k][idx] -= h
            g[idx] = (fn(plus) - fn(minus)) / (2 * h)
        out[k] = g
    return out


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b)))


def test_identity_returns_input():
    x = Tensor(np.arange(3.0), requires_grad=True)
    ad.backward(x, np.ones(3))
    assert np.array_equal(x.value, np.arange(3.0))
    np.testing.assert_array_equal(x.grad, np.ones(3))


def test_product_value_and_partials():
    x, y = Tensor(3.0, requires_grad=True), Tensor(4.0, requires_grad=True)
    z = x * y
    assert float(z.value) == 12.0
    z.backward()
    assert float(x.grad) == 4.0 and float(y.grad) == 3.0


def test_tanh_slope_at_zero():
    x = Tensor(0.0, requires_grad=True)
    ad.tanh(x).backward()
    assert float(x.grad) == pytest.approx(1.0)


def test_zero_weight_mlp_outputs_bias():
    params = {"W1": np.zeros((3, 4)), "b1": np.array([0.1, -0.2, 0.3, 0.0]),
              "W2": np.zeros((4, 2)), "b2": np.array([1.5, -2.0])}
    x = np.random.default_rng(0).standard_normal((5, 3))
    h = ad.tanh(Tensor(x) @ Tensor(params["W1"]) + Tensor(params["b1"]))
    out = h @ Tensor(params["W2"]) + Tensor(params["b2"])
    np.testing.assert_allclose(out.value, np.tile(params["b2"], (5, 1)))


def _mlp3(p, x):
    h = ad.tanh(x @ p["W1"] + p["b1"])
    h = ad.tanh(h @ p["W2"] + p["b2"])
    return ((h @ p["W3"] + p["b3"]) ** 2).sum()


def test_mlp_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    params = {"W1": rng.standard_normal((3, 5)), "b1": rng.standard_normal(5),
              "W2": rng.standard_normal((5, 4)) * 0.5, "b2": rng.standard_normal(4),
              "W3": rng.standard_normal((4, 2)), "b3": rng.standard_normal(2)}
    x = Tensor(rng.standard_normal((6, 3)))
    _, grads = value_and_grad(_mlp3, params, x)
    plain = lambda p: float(_mlp3({k: Tensor(v) for k, v in p.items()}, x).value)
    num = numeric_grad(plain, params)
    for k in params:
        assert rel_err(grads[k], num[k]) < 1e-5, k


def test_reused_node_accumulates():
    x = Tensor(2.0, requires_grad=True)
    y = x * x + x * 3.0
    y.backward()
    assert float(x.grad) == pytest.approx(7.0)


def test_broadcast_gradients_reduce():
    a = Tensor(np.ones((4, 3)), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    (a * b).sum().backward()
    np.testing.assert_array_equal(b.grad, 4 * np.ones(3))


def test_elementary_ops_gradcheck():
    rng = np.random.default_rng(2)
    params = {"a": rng.uniform(0.5, 2, (3, 4)), "b": rng.uniform(0.5, 2, (3, 4))}

    def f(p):
        a, b = p["a"], p["b"]
        z = ad.exp(a * 0.3) / b - a ** 3 + (a - b) * 2.0
        z = ad.concatenate([z[:, :2], ad.relu(z[:, 2:] - 0.1)], axis=1)
        return z.reshape((4, 3)).T.mean() + (1.0 / a).sum()

    _, grads = value_and_grad(f, params)
    num = numeric_grad(lambda p: float(f({k: Tensor(v) for k, v in p.items()}).value), params)
    for k in params:
        assert rel_err(grads[k], num[k]) < 1e-6


def test_conv2d_gradcheck():
    rng = np.random.default_rng(3)
    params = {"w": rng.standard_normal((2, 1, 3, 3)), "b": rng.standard_normal(2)}
    x = Tensor(rng.standard_normal((2, 1, 7, 7)))
    for stride, padding in ((1, "same"), (3, "same"), (1, "valid"), (3, "valid")):
        def f(p):
            return (ad.tanh(ad.conv2d(x, p["w"], p["b"], stride, padding)) ** 2).sum()

        _, grads = value_and_grad(f, params)
        num = numeric_grad(lambda p: float(f({k: Tensor(v) for k, v in p.items()}).value), params)
        for k in params:
            assert rel_err(grads[k], num[k]) < 1e-5


def test_conv_output_sizes():
    assert ad.conv_output_size(28, 3, 1, "same")[0] == 28
    assert ad.conv_output_size(28, 3, 3, "same")[0] == 10
    assert ad.conv_output_size(28, 3, 1, "valid")[0] == 26


def test_linear_map_uses_adjoint():
    rng = np.random.default_rng(4)
    A = rng.standard_normal((3, 5))
    x = Tensor(rng.standard_normal(5), requires_grad=True)
    y = ad.linear_map(x, lambda v: A @ v, lambda g: A.T @ g)
    (y * y).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * A.T @ A @ x.value)


# Adam ----------------------------------------------------------------------

def test_adam_zero_gradient_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    new, state = adam_step(p, {"w": np.zeros(2)}, AdamState.zeros_like(p))
    np.testing.assert_array_equal(new["w"], p["w"])
    assert state.step == 1


def test_adam_first_step_is_unit_lr():
    p = {"w": np.array(0.5)}
    new, _ = adam_step(p, {"w": np.array(1.0)}, AdamState.zeros_like(p), lr=0.001)
    assert float(p["w"] - new["w"]) == pytest.approx(0.001, rel=1e-6)


def test_adam_converges_on_convex_scalar():
    p = {"t": np.array(1.0)}
    state = AdamState.zeros_like(p)
    for _ in range(100):
        p, state = adam_step(p, {"t": 2 * p["t"]}, state, lr=0.1)
    assert abs(float(p["t"])) < 0.1


@given(arrays(np.float64, 6, elements=st.floats(-2, 2)))
def test_sum_of_squares_gradient_property(v):
    val, grads = value_and_grad(lambda p: (p["x"] * p["x"]).sum(), {"x": v})
    assert val == pytest.approx(float(np.sum(v * v)))
    np.testing.assert_allclose(grads["x"], 2 * v)
