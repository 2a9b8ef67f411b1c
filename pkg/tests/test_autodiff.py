"""Gradient-engine tests: closed-form cases, finite-difference oracles,
and the double-backprop path used by the input-gradient penalty."""

import numpy as np
import pytest

from sjko import autodiff as ad
from sjko.autodiff import ParamVector
from sjko.nets import MLPSpec, mlp_apply, mlp_new
from sjko.rng import StreamRng


def scalar_builder(fn):
    """Adapt fn(params_dict) into the (inputs, params) builder protocol."""
    return lambda inputs, params: fn(params)


def central_diff(value_fn, flat, eps=1e-5):
    out = np.zeros_like(flat)
    for i in range(flat.size):
        hi = flat.copy()
        hi[i] += eps
        lo = flat.copy()
        lo[i] -= eps
        out[i] = (value_fn(hi) - value_fn(lo)) / (2 * eps)
    return out


def test_forward_sum_of_squares():
    params = ParamVector({"x": np.array([1.0, 2.0])})
    out, _ = ad.forward(scalar_builder(lambda p: ad.reduce_sum(ad.square(p["x"]))), [], params)
    assert out == 5.0


def test_forward_softplus_at_zero():
    params = ParamVector({"x": np.array(0.0)})
    out, _ = ad.forward(scalar_builder(lambda p: ad.softplus(p["x"])), [], params)
    assert out == pytest.approx(np.log(2.0), abs=1e-12)


def test_forward_matches_straight_line_mlp():
    # 2-layer MLP on a 3-dim input vs an evaluation written without the graph
    spec = MLPSpec(in_dim=3, hidden_dims=(4,), out_dim=2)
    params = mlp_new(spec, seed=11)
    x = np.array([[0.3, -1.2, 0.7]])

    def builder(inputs, p):
        return ad.reduce_sum(mlp_apply(spec, p, inputs[0]))

    out, graph = ad.forward(builder, [x], params)
    h = x @ params.get("w0") + params.get("b0")
    h = h * (1.0 / (1.0 + np.exp(-h)))
    expected = np.sum(h @ params.get("w1") + params.get("b1"))
    assert out == pytest.approx(expected, rel=1e-14)
    assert not graph.has_nan


def test_forward_flags_nan():
    params = ParamVector({"x": np.array(2000.0)})
    with np.errstate(over="ignore", invalid="ignore"):
        _, graph = ad.forward(scalar_builder(lambda p: ad.log(ad.neg(ad.exp(p["x"])))), [], params)
    assert graph.has_nan


def test_grad_square():
    params = ParamVector({"x": np.array(3.0)})
    _, graph = ad.forward(scalar_builder(lambda p: ad.square(p["x"])), [], params)
    assert ad.grad(graph).get("x") == pytest.approx(6.0)


def test_grad_quadratic_form():
    a = np.array([[2.0, 0.5], [0.5, 1.0]])
    w = np.array([[1.0], [-2.0]])
    params = ParamVector({"w": w})

    def builder(inputs, p):
        return ad.reduce_sum(ad.mul(p["w"], ad.matmul(ad.constant(a), p["w"])))

    _, graph = ad.forward(builder, [], params)
    expected = 2.0 * a @ w
    np.testing.assert_allclose(ad.grad(graph).get("w"), expected, rtol=1e-12)


def test_grad_rejects_nonscalar():
    params = ParamVector({"x": np.array([1.0, 2.0])})
    _, graph = ad.forward(scalar_builder(lambda p: ad.square(p["x"])), [], params)
    with pytest.raises(ad.GraphError):
        ad.grad(graph)


def test_grad_unused_params_are_exact_zero():
    params = ParamVector({"x": np.array(3.0), "unused": np.array([1.0, 1.0])})
    _, graph = ad.forward(scalar_builder(lambda p: ad.square(p["x"])), [], params)
    assert np.array_equal(ad.grad(graph).get("unused"), np.zeros(2))


def test_grad_mlp_matches_finite_differences():
    spec = MLPSpec(in_dim=2, hidden_dims=(16, 16), out_dim=1)
    params = mlp_new(spec, seed=5)
    x = StreamRng(3).normal_matrix(4, 2)

    def builder(inputs, p):
        return ad.reduce_sum(mlp_apply(spec, p, ad.constant(x)))

    err = ad.finite_diff_check(builder, [], params, epsilon=1e-5)
    assert err <= 1e-6


@pytest.mark.parametrize("activation", ["silu", "softplus"])
def test_every_primitive_matches_finite_differences(activation):
    # exercises matmul/add/activation/exp/log/square/slices at 100 random points
    rng = StreamRng(77)
    spec = MLPSpec(in_dim=3, hidden_dims=(5,), out_dim=2, activation=activation)
    worst = 0.0
    for trial in range(100):
        params = mlp_new(spec, seed=1000 + trial)
        x = rng.normal_matrix(2, 3)

        def builder(inputs, p):
            h = mlp_apply(spec, p, ad.constant(x))
            pos = ad.softplus(h)                      # > 0, safe for log
            mixed = ad.add(ad.log(pos), ad.exp(ad.scale(h, 0.1)))
            return ad.reduce_sum(ad.square(ad.slice_cols(mixed, 0, 1)))

        worst = max(worst, ad.finite_diff_check(builder, [], params, epsilon=1e-5))
    assert worst <= 1e-6


def test_relu_gradient_away_from_kink():
    # central differences are valid for relu only when no bump crosses zero
    rng = StreamRng(78)
    x = rng.normals(50)
    x = np.where(np.abs(x) < 0.1, x + np.sign(x) * 0.2, x)
    params = ParamVector({"x": x})

    def builder(inputs, p):
        return ad.reduce_sum(ad.relu(p["x"]))

    assert ad.finite_diff_check(builder, [], params, epsilon=1e-5) <= 1e-9


def test_grad_linearity():
    spec = MLPSpec(in_dim=2, hidden_dims=(6,), out_dim=1)
    params = mlp_new(spec, seed=2)
    x = StreamRng(4).normal_matrix(3, 2)

    def f_builder(inputs, p):
        return ad.reduce_sum(mlp_apply(spec, p, ad.constant(x)))

    def g_builder(inputs, p):
        return ad.reduce_sum(ad.square(mlp_apply(spec, p, ad.constant(x))))

    a, b = 2.5, -1.25

    def combo_builder(inputs, p):
        return ad.add(ad.scale(f_builder(inputs, p), a), ad.scale(g_builder(inputs, p), b))

    _, gf = ad.forward(f_builder, [], params)
    _, gg = ad.forward(g_builder, [], params)
    _, gc = ad.forward(combo_builder, [], params)
    combo = ad.grad(gc).to_flat()
    split = a * ad.grad(gf).to_flat() + b * ad.grad(gg).to_flat()
    np.testing.assert_allclose(combo, split, atol=1e-12)


def test_input_gradient_half_norm():
    y = np.array([[1.0, -2.0]])

    def builder(inputs, p):
        return ad.scale(ad.reduce_sum(ad.square(inputs[0])), 0.5)

    _, graph = ad.forward(builder, [y], ParamVector({}))
    np.testing.assert_allclose(ad.input_gradient(graph), y, rtol=1e-15)


def test_input_gradient_linear_potential():
    c = np.array([[0.7], [-0.3]])
    y = np.array([[2.0, 5.0]])

    def builder(inputs, p):
        return ad.reduce_sum(ad.matmul(inputs[0], ad.constant(c)))

    _, graph = ad.forward(builder, [y], ParamVector({}))
    np.testing.assert_allclose(ad.input_gradient(graph), c.T, rtol=1e-15)


def test_input_gradient_missing_input_errors():
    y = np.array([[1.0, 1.0]])

    def builder(inputs, p):
        return ad.constant(np.float64(1.0))

    _, graph = ad.forward(builder, [y], ParamVector({}))
    with pytest.raises(ad.GraphError):
        ad.input_gradient(graph)


def test_input_gradient_mlp_matches_finite_differences():
    spec = MLPSpec(in_dim=3, hidden_dims=(8, 8), out_dim=1)
    params = mlp_new(spec, seed=9)
    y = StreamRng(12).normals(3)

    def builder(inputs, p):
        return ad.reduce_sum(mlp_apply(spec, p, inputs[0]))

    _, graph = ad.forward(builder, [y[None, :]], params)
    analytic = ad.input_gradient(graph).ravel()

    def value_fn(flat):
        return float(mlp_forward_sum(spec, params, flat))

    def mlp_forward_sum(spec, params, flat):
        from sjko.nets import mlp_forward
        return np.sum(mlp_forward(spec, params, flat[None, :]))

    fd = central_diff(value_fn, y.copy())
    rel = np.abs(analytic - fd) / (np.abs(analytic) + 1e-12)
    assert rel.max() <= 1e-6


class TestR1ParamGradient:
    def test_linear_potential(self):
        a = np.array([[0.4], [-1.1]])
        y = np.array([[0.0, 0.0]])

        def potential(y_leaf, p):
            return ad.reduce_sum(ad.matmul(y_leaf, p["a"]))

        penalty, grads = ad.r1_param_gradient(potential, y, ParamVector({"a": a}))
        assert penalty == pytest.approx(float(np.sum(a ** 2)), rel=1e-12)
        np.testing.assert_allclose(grads.get("a"), 2.0 * a, rtol=1e-12)

    def test_half_norm_no_params(self):
        y = np.array([[1.0, 2.0]])

        def potential(y_leaf, p):
            return ad.scale(ad.reduce_sum(ad.square(y_leaf)), 0.5)

        penalty, grads = ad.r1_param_gradient(potential, y, ParamVector({}))
        assert penalty == pytest.approx(5.0, rel=1e-12)
        assert grads.total_len == 0

    def test_mlp_matches_finite_differences_of_penalty(self):
        spec = MLPSpec(in_dim=2, hidden_dims=(8, 8), out_dim=1)
        params = mlp_new(spec, seed=21)
        y = StreamRng(8).normal_matrix(3, 2)

        def potential(y_leaf, p):
            return ad.reduce_sum(mlp_apply(spec, p, y_leaf))

        penalty, grads = ad.r1_param_gradient(potential, y, params)

        def penalty_at(flat):
            p, _ = ad.r1_param_gradient(potential, y, params.with_flat(flat))
            return p

        fd = central_diff(penalty_at, params.to_flat(), eps=1e-5)
        rel = np.abs(grads.to_flat() - fd) / (np.abs(grads.to_flat()) + 1e-12)
        assert rel.max() <= 1e-4
        assert penalty > 0.0

    def test_rejects_piecewise_linear_potential(self):
        spec = MLPSpec(in_dim=2, hidden_dims=(4,), out_dim=1, activation="relu")
        params = mlp_new(spec, seed=1)
        y = np.array([[0.5, -0.5]])

        def potential(y_leaf, p):
            return ad.reduce_sum(mlp_apply(spec, p, y_leaf))

        with pytest.raises(ad.GraphError):
            ad.r1_param_gradient(potential, y, params)


class TestFiniteDiffCheck:
    def test_linear_is_near_exact(self):
        c = np.array([2.0, -3.0, 0.5])
        params = ParamVector({"x": np.zeros(3)})

        def builder(inputs, p):
            return ad.reduce_sum(ad.mul(p["x"], ad.constant(c)))

        assert ad.finite_diff_check(builder, [], params, epsilon=1e-5) <= 1e-10

    def test_exp_truncation_is_second_order(self):
        params = ParamVector({"x": np.array(0.0)})

        def builder(inputs, p):
            return ad.exp(p["x"])

        assert ad.finite_diff_check(builder, [], params, epsilon=1e-5) <= 1e-8

    def test_detects_corrupted_gradient(self):
        params = ParamVector({"x": np.array([1.0, 2.0])})

        def value_fn(flat):
            return float(np.sum(flat ** 2))

        analytic = 2.0 * params.get("x")
        analytic = analytic.copy()
        analytic[0] += 1.0  # deliberate corruption
        fd = central_diff(value_fn, params.to_flat())
        rel = np.abs(analytic - fd) / (np.abs(analytic) + 1e-12)
        assert rel.max() >= 0.1

    def test_epsilon_range_enforced(self):
        params = ParamVector({"x": np.array(1.0)})

        def builder(inputs, p):
            return ad.square(p["x"])

        with pytest.raises(ad.GraphError):
            ad.finite_diff_check(builder, [], params, epsilon=1e-2)


def test_determinism_bitwise():
    spec = MLPSpec(in_dim=4, hidden_dims=(32, 32), out_dim=1)
    params = mlp_new(spec, seed=3)
    x = StreamRng(5).normal_matrix(16, 4)

    def builder(inputs, p):
        return ad.reduce_sum(ad.square(mlp_apply(spec, p, ad.constant(x))))

    out1, g1 = ad.forward(builder, [], params)
    out2, g2 = ad.forward(builder, [], params)
    assert out1 == out2
    f1 = ad.grad(g1).to_flat()
    f2 = ad.grad(g2).to_flat()
    assert np.array_equal(f1, f2)


def test_softplus_stable_at_800():
    params = ParamVector({"x": np.array(800.0)})
    out, _ = ad.forward(scalar_builder(lambda p: ad.softplus(p["x"])), [], params)
    assert np.isfinite(out)
    assert out == pytest.approx(800.0, abs=1e-9)


def test_concat_and_slice_roundtrip_gradients():
    params = ParamVector({"a": np.arange(6.0).reshape(2, 3), "b": np.ones((2, 2))})

    def builder(inputs, p):
        joined = ad.concat_cols(p["a"], p["b"])
        stacked = ad.concat_rows(joined, joined)
        return ad.reduce_sum(ad.square(ad.slice_cols(stacked, 1, 4)))

    err = ad.finite_diff_check(builder, [], params, epsilon=1e-5)
    assert err <= 1e-8


def test_param_vector_flat_roundtrip():
    pv = ParamVector({"w": np.arange(6.0).reshape(2, 3), "b": np.array([7.0, 8.0, 9.0])})
    assert pv.total_len == 9
    flat = pv.to_flat()
    back = pv.with_flat(flat)
    assert back == pv
    bumped = pv.with_flat(flat + 1.0)
    assert not (bumped == pv)
    assert bumped.get("w")[0, 0] == 1.0
