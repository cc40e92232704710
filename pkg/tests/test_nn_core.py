import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from trajad.nn_core import (LstmLayerParams, LstmState, RmspropState, backward_through_time,
                            clip_gradients, global_norm, lstm_forward, lstm_step,
                            masked_mse_loss, rmsprop_update, sigmoid)


def _layer(rng, d, h, scale=0.5):
    H4 = 4 * h
    return LstmLayerParams(rng.normal(0, scale, (H4, d)), rng.normal(0, scale, (H4, h)),
                           rng.normal(0, scale, H4))


# -- lstm_step -----------------------------------------------------------------

def test_zero_weights_fixed_point():
    p = LstmLayerParams.zeros(3, 4)
    s = lstm_step(p, np.array([5.0, -2.0, 1.0]), LstmState.zeros(4))
    assert np.all(s.h == 0) and np.all(s.c == 0)


def test_zero_weights_unit_cell():
    p = LstmLayerParams.zeros(2, 3)
    s = lstm_step(p, np.array([0.3, 0.7]), LstmState(np.zeros(3), np.ones(3)))
    np.testing.assert_allclose(s.c, 0.5, rtol=0, atol=1e-15)
    np.testing.assert_allclose(s.h, 0.5 * math.tanh(0.5), rtol=0, atol=1e-15)
    assert s.h[0] == pytest.approx(0.23106, abs=1e-5)


def test_step_matches_scalar_oracle(rng):
    p = _layer(rng, 2, 3)
    x, h, c = rng.normal(size=2), rng.normal(size=3), rng.normal(size=3)
    s = lstm_step(p, x, LstmState(h, c))
    h_ref, c_ref = oracles.lstm_step_scalar(p.W, p.U, p.b, x, h, c)
    np.testing.assert_allclose(s.h, h_ref, rtol=0, atol=1e-12)
    np.testing.assert_allclose(s.c, c_ref, rtol=0, atol=1e-12)


def test_step_dimension_mismatch():
    p = LstmLayerParams.zeros(2, 3)
    with pytest.raises(ValueError):
        lstm_step(p, np.zeros(3), LstmState.zeros(3))
    with pytest.raises(ValueError):
        lstm_step(p, np.zeros(2), LstmState.zeros(4))


def test_sigmoid_extremes_are_finite():
    z = np.array([-1e4, -50.0, 0.0, 50.0, 1e4])
    s = sigmoid(z)
    assert np.all(np.isfinite(s))
    assert s[2] == 0.5 and s[0] == 0.0 and s[-1] == 1.0


@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=2),
       st.integers(0, 2**31 - 1))
def test_hidden_state_bounded(x, seed):
    r = np.random.default_rng(seed)
    p = _layer(r, 2, 3, scale=3.0)
    s = lstm_step(p, np.array(x), LstmState(r.uniform(-1, 1, 3), r.normal(0, 10, 3)))
    # strict in exact arithmetic; tanh and sigmoid round to 1.0 once saturated
    assert np.all(np.abs(s.h) <= 1.0)
    assert np.all(np.isfinite(s.c))


# -- lstm_forward ----------------------------------------------------------------

def test_forward_zero_everything():
    layers = [LstmLayerParams.zeros(2, 3), LstmLayerParams.zeros(3, 2)]
    hist, finals = lstm_forward(layers, np.ones((2, 6, 2)))
    assert all(np.all(hh.outputs == 0) for hh in hist)
    assert all(np.all(f.h == 0) and np.all(f.c == 0) for f in finals)


def test_forward_empty_sequence():
    with pytest.raises(ValueError, match="empty sequence"):
        lstm_forward([LstmLayerParams.zeros(2, 3)], np.zeros((1, 0, 2)))


def test_forward_equals_composed_steps(rng):
    layers = [_layer(rng, 2, 4), _layer(rng, 4, 3)]
    xs = rng.normal(size=(5, 2))
    _, finals = lstm_forward(layers, xs)
    states = [LstmState.zeros(4), LstmState.zeros(3)]
    for x in xs:
        inp = x
        for k, p in enumerate(layers):
            states[k] = lstm_step(p, inp, states[k])
            inp = states[k].h
    for f, s in zip(finals, states):
        np.testing.assert_allclose(f.h, s.h, rtol=0, atol=1e-14)
        np.testing.assert_allclose(f.c, s.c, rtol=0, atol=1e-14)


def test_masked_steps_carry_state(rng):
    layers = [_layer(rng, 2, 3)]
    x = rng.normal(size=(1, 6, 2))
    mask = np.array([[True, True, True, False, False, False]])
    _, f_masked = lstm_forward(layers, x, mask=mask)
    _, f_short = lstm_forward(layers, x[:, :3])
    np.testing.assert_array_equal(f_masked[0].h, f_short[0].h)


# -- loss ------------------------------------------------------------------------

def test_loss_identity():
    y = np.ones((1, 3, 3))
    loss, g = masked_mse_loss(y, y, np.ones((1, 3), bool))
    assert loss == 0 and np.all(g == 0)


def test_loss_unit_residual():
    pred = np.zeros((1, 3, 3))
    pred[0, 1] = (1.0, 0.0, 0.0)
    loss, g = masked_mse_loss(pred, np.zeros_like(pred), np.ones((1, 3), bool))
    assert loss == 0.5
    np.testing.assert_array_equal(g[0, 1], [1.0, 0.0, 0.0])
    assert np.all(g[0, [0, 2]] == 0)


def test_loss_all_masked():
    with pytest.raises(ValueError, match="no valid timesteps"):
        masked_mse_loss(np.zeros((1, 2, 3)), np.zeros((1, 2, 3)), np.zeros((1, 2), bool))


def test_loss_gradient_finite_difference(rng):
    pred, tgt = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    mask = np.array([True, True, False, True])
    _, g = masked_mse_loss(pred, tgt, mask)
    h = 1e-6
    for idx in np.ndindex(pred.shape):
        e = np.zeros_like(pred)
        e[idx] = h
        fd = (masked_mse_loss(pred + e, tgt, mask)[0] - masked_mse_loss(pred - e, tgt, mask)[0]) / (2 * h)
        assert abs(fd - g[idx]) <= 1e-6 * max(abs(fd), abs(g[idx]), 1e-8)


# -- BPTT ------------------------------------------------------------------------

def test_bptt_zero_gradient_in(rng):
    layers = [_layer(rng, 2, 3)]
    hist, _ = lstm_forward(layers, rng.normal(size=(2, 5, 2)))
    grads, dx, _ = backward_through_time(layers, hist, np.zeros((2, 5, 3)))
    assert all(np.all(g.W == 0) and np.all(g.U == 0) and np.all(g.b == 0) for g in grads)
    assert np.all(dx == 0)


def test_bptt_finite_difference_with_initial_state(rng):
    # dims 2/3, T=5, batch 2, loss = 1/2 sum (h_top * w)^2 over unmasked steps;
    # central differences are taken on an extended-precision forward pass
    layers = [_layer(rng, 2, 3), _layer(rng, 3, 3)]
    x = rng.normal(size=(2, 5, 2))
    mask = np.array([[True] * 5, [True] * 3 + [False] * 2])
    init = [LstmState(rng.normal(0, .5, (2, 3)), rng.normal(0, .5, (2, 3))) for _ in layers]
    wout = rng.normal(size=3)
    hist, _ = lstm_forward(layers, x, init=init, mask=mask)
    d_out = np.where(mask[..., None], hist[-1].outputs * wout * wout, 0.0)
    grads, dx, d_init = backward_through_time(layers, hist, d_out)

    LD = np.longdouble
    ld_layers = [[p.W.astype(LD), p.U.astype(LD), p.b.astype(LD)] for p in layers]
    ld_init = [[s.h.astype(LD), s.c.astype(LD)] for s in init]
    ld_x = x.astype(LD)
    step = LD(1e-5)

    def numeric(arr):
        out = np.zeros(arr.shape)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            lp = oracles.masked_stack_loss_ld(ld_layers, ld_x, ld_init, mask, wout)
            arr[idx] = orig - step
            lm = oracles.masked_stack_loss_ld(ld_layers, ld_x, ld_init, mask, wout)
            arr[idx] = orig
            out[idx] = float((lp - lm) / (2 * step))
        return out

    def check(analytic, num):
        assert np.all(oracles.relative_error(analytic, num)[np.abs(num) > 1e-12] <= 1e-4)
        assert np.all(np.abs(analytic - num) <= 1e-12 + 1e-4 * np.abs(num))

    for k in range(len(layers)):
        for j, name in enumerate(("W", "U", "b")):
            check(getattr(grads[k], name), numeric(ld_layers[k][j]))
        check(d_init[k].h, numeric(ld_init[k][0]))
        check(d_init[k].c, numeric(ld_init[k][1]))
    check(dx, numeric(ld_x))


def test_bptt_shape_mismatch(rng):
    layers = [_layer(rng, 2, 3)]
    hist, _ = lstm_forward(layers, rng.normal(size=(2, 5, 2)))
    with pytest.raises(ValueError):
        backward_through_time(layers, hist, np.zeros((2, 4, 3)))


@given(st.integers(0, 2**31 - 1))
def test_bptt_deterministic(seed):
    r = np.random.default_rng(seed)
    layers = [_layer(r, 2, 3)]
    x, d = r.normal(size=(2, 4, 2)), r.normal(size=(2, 4, 3))
    a = backward_through_time(layers, lstm_forward(layers, x)[0], d)[0][0]
    b = backward_through_time(layers, lstm_forward(layers, x)[0], d)[0][0]
    assert np.array_equal(a.W, b.W) and np.array_equal(a.U, b.U) and np.array_equal(a.b, b.b)


# -- clipping ----------------------------------------------------------------------

def test_clip_below_threshold_unchanged():
    g = {"a": np.array([3.0, 0.0])}
    assert clip_gradients(g, 5.0)["a"].tolist() == [3.0, 0.0]


def test_clip_halves():
    g = {"a": np.array([6.0]), "b": np.array([8.0])}
    out = clip_gradients(g, 5.0)
    assert out["a"][0] == 3.0 and out["b"][0] == 4.0


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20), st.floats(0.1, 50))
def test_clip_bound_and_idempotent(vals, max_norm):
    g = {"x": np.array(vals)}
    once = clip_gradients(g, max_norm)
    assert global_norm(once) <= max_norm * (1 + 1e-12)
    twice = clip_gradients(once, max_norm)
    np.testing.assert_allclose(twice["x"], once["x"], rtol=1e-12, atol=0)


# -- RMSprop -----------------------------------------------------------------------

def test_rmsprop_hand_example():
    p, st_ = rmsprop_update({"p": np.array(1.0)}, {"p": np.array(2.0)},
                            RmspropState(0.01, 0.9, 1e-8))
    assert st_.s["p"] == pytest.approx(0.4, abs=1e-15)
    assert float(p["p"]) == pytest.approx(1.0 - 0.02 / math.sqrt(0.4 + 1e-8), abs=1e-15)
    assert float(p["p"]) == pytest.approx(0.968377, abs=1e-6)


def test_rmsprop_zero_gradient_decays_accumulator():
    state = RmspropState(0.01, 0.9, 1e-8, {"p": np.array([2.0])})
    p, s = rmsprop_update({"p": np.array([1.5])}, {"p": np.array([0.0])}, state)
    assert p["p"][0] == 1.5
    assert s.s["p"][0] == pytest.approx(1.8, abs=1e-15)


def test_rmsprop_steps_shrink():
    params, state = {"p": np.array(1.0)}, RmspropState(0.01)
    steps = []
    for _ in range(3):
        new, state = rmsprop_update(params, {"p": np.array(2.0)}, state)
        steps.append(abs(float(params["p"] - new["p"])))
        params = new
    assert steps[0] > steps[1] > steps[2]


def test_rmsprop_rejects_nonfinite_without_mutation():
    params = {"p": np.array([1.0])}
    state = RmspropState(0.01, s={"p": np.array([0.5])})
    with pytest.raises(ValueError):
        rmsprop_update(params, {"p": np.array([np.nan])}, state)
    assert params["p"][0] == 1.0 and state.s["p"][0] == 0.5


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8), st.integers(1, 5))
def test_rmsprop_accumulator_nonnegative(g, n):
    params, state = {"p": np.zeros(len(g))}, RmspropState(0.01)
    for _ in range(n):
        params, state = rmsprop_update(params, {"p": np.array(g)}, state)
    assert np.all(state.s["p"] >= 0)
