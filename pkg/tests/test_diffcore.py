import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_diff
from staclab.diffcore import (
    AdamState,
    NumericFailure,
    ParamSet,
    RmsPropState,
    StructureError,
    Tensor,
    adam_step,
    backward,
    differentiate_through_update,
    grad,
    grad_through_update,
    no_grad,
    rmsprop_step,
    sg,
    value_and_grad,
)
from staclab.diffcore import tensor as T
from staclab.diffcore.tensor import record_stop_gradients, replay_stop_gradients

UNARY = {
    "exp": (T.exp, np.exp),
    "tanh": (T.tanh, np.tanh),
    "sigmoid": (T.sigmoid, lambda x: 1 / (1 + np.exp(-x))),
    "log1p_exp": (lambda x: T.log(1.0 + T.exp(x)), lambda x: np.log1p(np.exp(x))),
    "sqrt_sq": (lambda x: T.sqrt(x * x + 1.0), lambda x: np.sqrt(x * x + 1.0)),
    "power": (lambda x: (x * x + 1.0) ** 1.5, lambda x: (x * x + 1.0) ** 1.5),
    "div": (lambda x: 1.0 / (2.0 + x * x), lambda x: 1.0 / (2.0 + x * x)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradient_matches_central_difference(name):
    op, ref = UNARY[name]
    x0 = np.random.default_rng(1).uniform(-1.5, 1.5, 5)
    g = grad(lambda p: T.tsum(op(p["x"]) * np.arange(1.0, 6.0)), ParamSet({"x": x0}))["x"]
    fd = central_diff(lambda x: float((ref(x) * np.arange(1.0, 6.0)).sum()), x0)
    np.testing.assert_allclose(g, fd, rtol=1e-7, atol=1e-9)


def _mlp(p, x):
    h = T.relu(x @ p["w0"] + p["b0"])
    return T.tsum(T.log_softmax(h @ p["w1"]) * np.eye(3)[[0, 2, 1, 1]])


def test_mlp_gradient_matches_central_difference():
    rng = np.random.default_rng(0)
    params = ParamSet({"w0": rng.standard_normal((5, 7)), "b0": rng.standard_normal(7), "w1": rng.standard_normal((7, 3))})
    x = rng.standard_normal((4, 5))
    g = grad(lambda p: _mlp(p, x), params)
    fd = central_diff(lambda v: _mlp({k: Tensor(a) for k, a in params.unflatten(v).items()}, x).item(), params.flatten())
    np.testing.assert_allclose(g.flatten(), fd, rtol=1e-6, atol=1e-8)


def test_second_order_mixed_partial():
    # f = sum(t^2 e); d/de <grad_t f, w> = 2 t w
    t0, e0, w = np.array([1.0, -2.0, 0.5]), np.array([0.3, 0.1, 2.0]), np.array([1.0, 2.0, 3.0])
    t, e = Tensor(t0, requires_grad=True), Tensor(e0, requires_grad=True)
    (g,) = backward(T.tsum(t * t * e), [t], create_graph=True)
    (ge,) = backward(T.tsum(g * w), [e])
    np.testing.assert_allclose(ge.data, 2 * t0 * w, rtol=1e-15)


@pytest.mark.parametrize("reverse", [True, False])
def test_linear_recurrence_gradients(reverse):
    rng = np.random.default_rng(3)
    x0, k0 = rng.standard_normal((6, 2)), rng.uniform(-0.9, 0.9, (6, 2))
    w = rng.standard_normal((6, 2))

    def f(x, k):
        return float((np.asarray(T.linear_recurrence(Tensor(x), Tensor(k), reverse).data) * w).sum())

    x, k = Tensor(x0, requires_grad=True), Tensor(k0, requires_grad=True)
    gx, gk = backward(T.tsum(T.linear_recurrence(x, k, reverse) * w), [x, k])
    np.testing.assert_allclose(gx.data, central_diff(lambda v: f(v, k0), x0), rtol=1e-7, atol=1e-9)
    np.testing.assert_allclose(gk.data, central_diff(lambda v: f(x0, v), k0), rtol=1e-7, atol=1e-9)


def test_stop_gradient_blocks_gradient_but_keeps_value():
    x = Tensor(2.0, requires_grad=True)
    y = x * sg(x) + 1.0
    assert y.item() == 5.0
    (g,) = backward(y, [x])
    assert g.item() == 2.0


def test_stop_gradient_example_from_product_rule():
    # d/dx [x^2 * sg(x)] at x = 1 is 2 x sg(x) = 2, while the full derivative would be 3
    x = Tensor(1.0, requires_grad=True)
    assert backward(x * x * sg(x), [x])[0].item() == 2.0
    assert backward(x * x * x, [x])[0].item() == 3.0


def test_stop_gradient_tape_replays_reference_values():
    x = Tensor(2.0)
    with record_stop_gradients() as tape:
        y = sg(x * x)
    assert y.item() == 4.0
    with replay_stop_gradients(tape):
        z = sg(Tensor(10.0))
    assert z.item() == 4.0


def test_unused_input_gets_zero_gradient():
    a, b = Tensor([1.0, 2.0], requires_grad=True), Tensor(3.0, requires_grad=True)
    ga, gb = backward(T.tsum(a * a), [a, b])
    np.testing.assert_array_equal(gb.data, 0.0)
    np.testing.assert_array_equal(ga.data, [2.0, 4.0])


def test_no_grad_records_nothing():
    a = Tensor(1.0, requires_grad=True)
    with no_grad():
        b = a * 2.0
    assert not b.requires_grad


def test_non_finite_value_raises_numeric_failure():
    with pytest.raises(NumericFailure, match="log"):
        T.log(Tensor([-1.0]))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=6), st.lists(st.floats(-3, 3), min_size=2, max_size=6))
def test_broadcast_gradients_sum_back(xs, ys):
    n = min(len(xs), len(ys))
    a = Tensor(np.array(xs[:n]).reshape(n, 1), requires_grad=True)
    b = Tensor(np.array(ys[:n]), requires_grad=True)
    ga, gb = backward(T.tsum(a * b), [a, b])
    np.testing.assert_allclose(ga.data[:, 0], np.full(n, sum(ys[:n])), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(gb.data, np.full(n, sum(xs[:n])), rtol=1e-12, atol=1e-12)


# -- parameter containers ------------------------------------------------------------


def test_paramset_is_immutable_and_flattens_round_trip():
    p = ParamSet({"a": np.ones((2, 3)), "b": np.arange(4.0)})
    with pytest.raises(ValueError):
        p["a"][0, 0] = 5.0
    assert p.size == 10
    assert p.unflatten(p.flatten()).equals(p)


def test_congruence_errors():
    p = ParamSet({"a": np.ones(2)})
    with pytest.raises(StructureError):
        p.check_congruent(ParamSet({"a": np.ones(3)}))
    with pytest.raises(StructureError):
        p.check_congruent(ParamSet({"b": np.ones(2)}))


# -- optimizers ---------------------------------------------------------------------


def test_rmsprop_matches_hand_computation():
    p = ParamSet({"w": np.array([1.0, -1.0])})
    g = ParamSet({"w": np.array([0.5, 2.0])})
    s = RmsPropState.init(p, decay=0.99, eps=0.1, lr_start=6e-4, lr_end=0.0, total_steps=10)
    new, s1 = rmsprop_step(p, g, s)
    ms = 0.01 * np.array([0.25, 4.0])
    np.testing.assert_allclose(s1.mean_square["w"], ms, rtol=1e-15)
    np.testing.assert_allclose(new["w"], [1.0, -1.0] - 6e-4 * np.array([0.5, 2.0]) / (np.sqrt(ms) + 0.1), rtol=1e-15)
    assert s1.step == 1 and s1.lr == pytest.approx(6e-4 * 0.9)


def test_rmsprop_schedule_reaches_zero():
    s = RmsPropState.init(ParamSet({"w": np.zeros(1)}), lr_start=6e-4, lr_end=0.0, total_steps=4)
    assert [s.lr_at(k) for k in (0, 2, 4, 9)] == pytest.approx([6e-4, 3e-4, 0.0, 0.0])


def test_adam_matches_hand_computation():
    s = AdamState.init(2, lr=1e-3, b1=0.9, b2=0.999, eps=1e-4)
    eta, s1 = adam_step(np.array([4.6, 4.6]), np.array([0.2, -3.0]), s)
    # after one step the bias-corrected moments are g and g^2
    expected = 4.6 - 1e-3 * np.array([0.2, -3.0]) / (np.abs([0.2, -3.0]) + 1e-4)
    np.testing.assert_allclose(eta, expected, rtol=1e-12)
    eta2, _ = adam_step(eta, np.array([0.2, -3.0]), s1)
    np.testing.assert_allclose(eta2 - eta, expected - 4.6, rtol=1e-9)


def test_adam_length_mismatch_is_structure_error():
    with pytest.raises(StructureError):
        adam_step(np.zeros(3), np.zeros(2), AdamState.init(3))


# -- differentiating through an update -------------------------------------------------


def _quadratic_problem(lr=0.5):
    params = ParamSet({"w": np.array([1.0])})
    opt = RmsPropState(mean_square=ParamSet({"w": np.array([4.0])}), decay=0.5, eps=0.0, lr_start=lr, lr_end=lr, total_steps=1)

    def inner(theta, eta):
        return eta[0] * T.tsum(theta["w"] * theta["w"])

    def outer(theta):
        return T.tsum(theta["w"])

    return params, opt, inner, outer


def test_grad_through_update_closed_form():
    # g = 2 eta w; s' = d s + (1-d) g^2 held fixed; w' = w - lr g / sqrt(s')
    # d w'/d eta = -lr * 2 w / sqrt(s')
    params, opt, inner, outer = _quadratic_problem()
    eta = np.array([1.0])
    s_new = 0.5 * 4.0 + 0.5 * 4.0
    mg = grad_through_update(inner, outer, params, eta, opt)
    np.testing.assert_allclose(mg, [-0.5 * 2.0 / np.sqrt(s_new)], rtol=1e-15)


def test_grad_through_denominator_matches_finite_difference():
    params, opt, inner, outer = _quadratic_problem()

    def w_new(e):
        g = 2 * e[0] * 1.0
        s = 0.5 * 4.0 + 0.5 * g * g
        return 1.0 - 0.5 * g / np.sqrt(s)

    eta = np.array([0.7])
    mg = grad_through_update(inner, outer, params, eta, opt, through_denominator=True)
    np.testing.assert_allclose(mg, central_diff(w_new, eta), rtol=1e-8)


def test_differentiate_through_update_returns_consistent_step():
    params, opt, inner, outer = _quadratic_problem()
    res = differentiate_through_update(inner, outer, params, np.array([1.0]), opt)
    expected, _ = rmsprop_step(params, res.inner_grads, opt)
    assert res.params_after.equals(expected)
    assert res.outer_value == pytest.approx(1.0 - 0.5 * 2.0 / 2.0)


def test_value_and_grad_scalar_check():
    with pytest.raises(ValueError, match="scalar"):
        value_and_grad(lambda p: p["w"] * 2.0, ParamSet({"w": np.ones(2)}))
