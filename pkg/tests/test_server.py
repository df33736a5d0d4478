import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cflag import model as mc
from cflag.client import ClientState, client_rng
from cflag.errors import ConfigurationError
from cflag.memory import build_memory
from cflag.server import (MemoryConfig, PrologueResult, ServerState, adap_lr, broadcast_grads,
                          gamma, gamma_surrogate, overfit_B, run_round, server_aggregate,
                          task_transition)
from cflag.model import Dataset, LossModel

from conftest import regression_data


def test_adap_lr_examples():
    assert adap_lr(0.0, 4.0, 1.0, 0.1, 5.0, 0.2, 5) == (0.1, 0.1, False, False)
    r = adap_lr(-2.0, 4.0, 1.0, 0.1, 5.0, 0.2, 5)
    assert r.alpha == pytest.approx(0.15) and r.beta == 0.1 and not r.transference
    r = adap_lr(1.0, 4.0, 2.0, 0.1, 5.0, 0.2, 5, case="worst")
    assert r.beta == pytest.approx(0.05) and r.alpha == 0.1 and r.transference


def test_adap_lr_degenerate_fallbacks():
    assert adap_lr(1.0, 1.0, 0.0, 0.1, 5.0, 0.2, 5, beta=0.03) == (0.1, 0.03, True, True)
    assert adap_lr(-1.0, 0.0, 1.0, 0.1, 5.0, 0.2, 5).degenerate
    assert adap_lr(1.0, 1.0, 1.0, 0.3, 5.0, 0.2, 5).degenerate
    with pytest.raises(ConfigurationError):
        adap_lr(1.0, 1.0, 1.0, 0.1, 5.0, 0.2, 5, case="best")


def test_vertex_identity():
    rng = np.random.default_rng(0)
    S, f = rng.standard_normal(4), rng.standard_normal(4)
    lam = float(f @ S)
    if lam <= 0:
        f = -f
        lam = -lam
    L, alpha, p = 5.0, 0.1, 0.3
    r = adap_lr(lam, float(f @ f), float(S @ S), alpha, L, p, 4)
    val = gamma_surrogate("average", alpha, r.beta, L, p, 4, S, f)
    ref = -((1 - L * alpha) ** 2) * lam ** 2 / (2 * L * p * float(S @ S))
    assert val == pytest.approx(ref, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["average", "worst"]),
       st.floats(0.01, 0.19), st.floats(0.001, 0.2), st.floats(0.05, 1.0))
def test_adapted_surrogate_never_exceeds_base(seed, case, alpha, beta, p):
    rng = np.random.default_rng(seed)
    S, f = rng.standard_normal(5), rng.standard_normal(5)
    L, N = 5.0, 4
    lam = float(f @ S)
    r = adap_lr(lam, float(f @ f), float(S @ S), alpha, L, p, N, case, beta=beta)
    base = gamma_surrogate(case, alpha, beta, L, p, N, S, f)
    assert gamma_surrogate(case, r.alpha, r.beta, L, p, N, S, f) <= base + 1e-12


def test_gamma_formula():
    rng = np.random.default_rng(1)
    S, f = rng.standard_normal(6), rng.standard_normal(6)
    L, a, b = 5.0, 0.1, 0.01
    ref = L * b * b / 2 * sum(s * s for s in S) - b * (1 - L * a) * sum(x * y for x, y in zip(f, S))
    assert gamma(b, a, L, S, f) == pytest.approx(ref, rel=1e-12)
    assert gamma(b, a, L, np.zeros(6), f) == 0.0
    assert gamma(0.0, a, L, S, f) == 0.0
    assert gamma_surrogate("average", a, b, L, 0.5, 2, np.zeros(6), f) == 0.0


def test_overfit_B_coefficient_cancellation():
    rng = np.random.default_rng(2)
    gf, b, S = rng.standard_normal((3, 4))
    L = 4.0
    assert overfit_B(1 / L, 0.02, L, gf, b, S) == pytest.approx(0.02 * float(b @ S), rel=1e-12)
    assert overfit_B(0.1, 0.02, L, gf, np.zeros(4), S) == 0.0


def _server(N, **kw):
    base = dict(x=np.zeros(3), alpha=0.0, beta=0.05, L=5.0, E=2, N=N)
    base.update(kw)
    return ServerState(**base)


def test_broadcast_and_aggregate():
    s = _server(2)
    a, b = np.array([1.0, 2.0, 3.0]), np.array([-1.0, -2.0, -3.0])
    g, f = broadcast_grads(s, [PrologueResult(1, 0.5, b, None), PrologueResult(0, 0.5, a, None)])
    assert not g.any() and f is None
    s1 = _server(1)
    g, f = broadcast_grads(s1, [PrologueResult(0, 1.0, a, b)])
    np.testing.assert_array_equal(g, a)
    np.testing.assert_array_equal(f, b)
    with pytest.raises(ConfigurationError):
        broadcast_grads(s, [PrologueResult(0, 1.0, a, None)])
    np.testing.assert_allclose(server_aggregate(s, [a, a], [0.3, 0.7]), a, rtol=1e-15)
    with pytest.raises(ConfigurationError):
        server_aggregate(s, [a])


def _clients(seed, with_memory=False):
    model = LossModel("linear-mse", 3, 1)
    shards = [regression_data(5, 3, seed), regression_data(7, 3, seed + 1)]
    clients = [ClientState(i, shards[i].n / 12, shards[i], global_seed=seed) for i in range(2)]
    if with_memory:
        for c in clients:
            past = regression_data(6, 3, seed + 10 + c.id)
            c.past_tasks = [past]
            c.memory = build_memory(past, 3, seed=c.id)
    return model, clients


def _hand_stepped(model, clients, x_t, alpha, beta, E, seed, t):
    """Straight-line reimplementation of one fixed-rate round."""
    p = [c.weight for c in clients]
    gi = [mc.grad(model, x_t, c.current) for c in clients]
    g = p[0] * gi[0] + p[1] * gi[1]
    f = None
    if clients[0].memory is not None:
        fi = [mc.grad(model, x_t, c.memory.items) for c in clients]
        f = p[0] * fi[0] + p[1] * fi[1]
    outs = []
    for c, g_i in zip(clients, gi):
        n = c.current.n
        rng = client_rng(seed, c.id, c.task, t)
        draws = rng.integers(0, n, size=E - 1)
        iterate_of = [x_t.copy() for _ in range(n)]
        x = x_t.copy()
        for k in range(E):
            if k >= 1:
                iterate_of[int(draws[k - 1])] = x.copy()
            delayed = np.mean([mc.grad_component(model, iterate_of[j], c.current, j)
                               for j in range(n)], axis=0)
            x = x - beta * (g - g_i + delayed)
        if f is not None:
            x = x - alpha * f
        outs.append(x)
    return p[0] * outs[0] + p[1] * outs[1]


@pytest.mark.parametrize("with_memory", [False, True])
def test_round_matches_hand_stepped_oracle(with_memory):
    model, clients = _clients(3, with_memory)
    x0 = np.array([0.1, -0.2, 0.3])
    s = _server(2, x=x0, alpha=0.04, global_seed=3)
    ref = _hand_stepped(model, clients, x0, 0.04, 0.05, 2, 3, 0)
    x1, rep = run_round(s, clients, model)
    np.testing.assert_allclose(x1, ref, rtol=1e-10, atol=1e-14)
    assert s.t == 1
    if with_memory:
        ws = rep.details["weighted_S"]
        closed = x0 - 0.04 * rep.details["f_tilde"] - 0.05 * ws
        np.testing.assert_allclose(x1, closed, rtol=1e-9, atol=1e-14)


def test_adaptation_without_memory_is_noop():
    model, clients = _clients(5)
    a = run_round(_server(2, adap_flag=True), clients, model)[0]
    b = run_round(_server(2, adap_flag=False), clients, model)[0]
    np.testing.assert_array_equal(a, b)


def test_fedtrack_round_ignores_memory_when_alpha_zero():
    model, clients = _clients(6, with_memory=True)
    a = run_round(_server(2, alpha=0.0), clients, model)[0]
    for c in clients:
        c.memory = None
    b = run_round(_server(2, alpha=0.0), clients, model)[0]
    np.testing.assert_allclose(a, b, rtol=1e-15)


def test_gamma_ad_not_above_gamma_in_adaptive_round():
    model, clients = _clients(7, with_memory=True)
    for case in ("average", "worst"):
        _, rep = run_round(_server(2, alpha=0.05, adap_flag=True, case=case), clients, model)
        assert rep.gamma_ad <= rep.gamma + 1e-12


def test_sqrt_schedule_and_alpha_check():
    s = _server(1, beta_schedule="sqrt", c=0.4, T=16)
    assert s.beta_t == pytest.approx(0.1)
    with pytest.raises(ConfigurationError):
        _server(1, beta_schedule="sqrt")
    with pytest.raises(ConfigurationError, match="2/\\(L\\(1\\+m\\)\\)"):
        _server(1, alpha=0.5, L=5.0).check_alpha()


def test_task_transition_bookkeeping():
    model, clients = _clients(8)
    s = _server(2, t=4)
    first = [c.current for c in clients]
    new = [Dataset(regression_data(4, 3, 20 + i).features, np.full(4, 7)) for i in range(2)]
    task_transition(s, clients, new, MemoryConfig(3))
    for c, old, shard in zip(clients, first, new):
        assert c.past.n == old.n and c.task == 1 and c.current is shard
        assert len(c.memory) == 3 and not (c.memory.items.labels == 7).any()
    assert s.task == 1 and s.t == 0
    assert sum(c.weight for c in clients) == pytest.approx(1.0)
    with pytest.raises(ConfigurationError):
        task_transition(s, clients, new[:1], MemoryConfig(3))
