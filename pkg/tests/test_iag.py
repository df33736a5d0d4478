import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cflag import model as mc
from cflag.client import ClientState, local_round
from cflag.iag import delayed_grad, gradient_error, iag_accumulate, iag_init, iag_refresh
from cflag.model import LossModel

from conftest import classification_data, regression_data


def brute_force_delayed(model, data, iterates, tau):
    """Mean over samples of each sample's gradient at the iterate recorded in ``tau``."""
    return np.mean([mc.grad_component(model, iterates[tau[j]], data, j)
                    for j in range(data.n)], axis=0)


def _toy():
    model = LossModel("linear-mse", 2, 1)
    data = regression_data(3, 2, 0)
    return model, data


def test_init_is_full_gradient():
    model, data = _toy()
    x0 = np.array([0.5, -1.0])
    state = iag_init(model, x0, data)
    ref = sum(mc.grad_component(model, x0, data, j) for j in range(3)) / 3
    np.testing.assert_allclose(delayed_grad(state), ref, rtol=1e-14)
    np.testing.assert_allclose(delayed_grad(state), mc.grad(model, x0, data), rtol=1e-14)
    assert not state.accum_S.any()
    assert gradient_error(state, model, x0) == pytest.approx(0.0, abs=1e-15)


def test_toy_tau_trace():
    model, data = _toy()
    x0, x1, x2 = np.array([0.0, 0.0]), np.array([1.0, 0.0]), np.array([1.0, 2.0])
    state = iag_init(model, x0, data)
    iag_refresh(state, 0, x1, 1)
    expect = (mc.grad_component(model, x1, data, 0) + mc.grad_component(model, x0, data, 1)
              + mc.grad_component(model, x0, data, 2)) / 3
    np.testing.assert_allclose(delayed_grad(state), expect, rtol=1e-13)
    iag_refresh(state, 2, x2, 2)
    assert state.tau.tolist() == [1, 0, 2]


def test_local_round_toy_schedule():
    model, data = _toy()
    client = ClientState(0, 1.0, data)
    x_t = np.array([0.2, 0.1])
    g = mc.grad(model, x_t, data)
    res = local_round(client, model, x_t, g, 0.05, 3, schedule=[0, 2])
    assert res.taus[-1].tolist() == [1, 0, 2]
    assert res.taus[1].tolist() == [1, 0, 0]


def test_refresh_contract():
    model, data = _toy()
    x0 = np.array([0.3, 0.4])
    state = iag_init(model, x0, data)
    before = state.aggregate.copy()
    iag_refresh(state, 1, x0, 1)
    np.testing.assert_allclose(state.aggregate, before, rtol=1e-12, atol=1e-15)
    with pytest.raises(ValueError):
        iag_refresh(state, 0, x0, 3)
    with pytest.raises(IndexError):
        iag_refresh(state, 3, x0, 2)


def test_accumulate_with_frozen_cache():
    model, data = _toy()
    state = iag_init(model, np.ones(2), data)
    for _ in range(4):
        iag_accumulate(state)
    np.testing.assert_allclose(state.accum_S, 4 * state.aggregate, rtol=1e-14)


def test_hundred_refreshes_match_recompute():
    model = LossModel("multinomial-logistic", 3, 3)
    data = classification_data(8, 3, 3, 1)
    rng = np.random.default_rng(2)
    state = iag_init(model, rng.standard_normal(model.dim), data, check=True)
    for k in range(1, 101):
        iag_refresh(state, int(rng.integers(8)), rng.standard_normal(model.dim), k)
    ref = state.cache.mean(axis=0)
    assert np.linalg.norm(state.aggregate - ref) <= 1e-10 * np.linalg.norm(ref)


def test_frozen_params_have_zero_gradient_error():
    model, data = _toy()
    x = np.array([1.0, -2.0])
    state = iag_init(model, x, data)
    for k in range(1, 4):
        iag_refresh(state, k % 3, x, k)
        assert gradient_error(state, model, x) <= 1e-13


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_delayed_grad_equals_brute_force(n, E, p, seed):
    model = LossModel("linear-mse", p, 1)
    data = regression_data(n, p, seed)
    client = ClientState(0, 1.0, data, global_seed=seed)
    x_t = np.random.default_rng(seed).standard_normal(p)
    g = mc.grad(model, x_t, data) + 0.1
    res = local_round(client, model, x_t, g, 0.01, E)
    for k in range(E):
        ref = brute_force_delayed(model, data, res.iterates, res.taus[k])
        np.testing.assert_allclose(res.delayed[k], ref, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(res.S_i, res.delayed.sum(axis=0), rtol=1e-12, atol=1e-14)
