"""Server side of a round: broadcast, adaptive rates, forgetting diagnostics, aggregation."""
from __future__ import annotations

import math
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import model as mc
from .client import (ClientState, LocalRoundResult, client_prologue, compose_update,
                     local_round, plain_local_round)
from .errors import ConfigurationError
from .memory import bias_ratio, build_memory, build_task_memory

CASES = ("average", "worst")
SCHEDULES = ("constant", "sqrt")


@dataclass
class ServerState:
    x: np.ndarray
    alpha: float
    beta: float
    L: float
    E: int
    N: int
    beta_schedule: str = "constant"
    c: float | None = None
    T: int = 1
    case: str = "average"
    adap_flag: bool = False
    m_config: float = 0.0
    local_rule: str = "iag"          # "plain" = E full-gradient steps, no correction
    global_seed: int = 0
    diagnostics: bool = True         # full-past gradients, bias and B(t)
    grad_error_diag: bool = False
    t: int = 0
    task: int = 0

    def __post_init__(self):
        self.x = np.array(self.x, dtype=np.float64)
        if self.case not in CASES:
            raise ConfigurationError(f"unknown adaptation case {self.case!r}")
        if self.beta_schedule not in SCHEDULES:
            raise ConfigurationError(f"unknown beta schedule {self.beta_schedule!r}")
        if self.beta_schedule == "sqrt" and not (self.c and self.c > 0):
            raise ConfigurationError("sqrt schedule needs a positive constant c")
        if self.E < 1 or self.N < 1 or self.T < 1:
            raise ConfigurationError("E, N and T must be >= 1")
        if self.alpha < 0 or not self.L > 0:
            raise ConfigurationError("need alpha >= 0 and L > 0")

    @property
    def beta_t(self) -> float:
        if self.beta_schedule == "sqrt":
            return self.c / math.sqrt(self.T)
        return self.beta

    def check_alpha(self) -> None:
        limit = 2.0 / (self.L * (1.0 + self.m_config))
        if not self.alpha < limit:
            raise ConfigurationError(
                f"alpha={self.alpha!r} violates alpha < 2/(L(1+m)) = {limit!r} "
                f"(L={self.L!r}, m={self.m_config!r}); the descent guarantee on past "
                "tasks needs this precondition")


class PrologueResult(NamedTuple):
    client_id: int
    weight: float
    grad_g: np.ndarray
    grad_f_tilde: np.ndarray | None


class AdaptedRates(NamedTuple):
    alpha: float
    beta: float
    transference: bool
    degenerate: bool = False


@dataclass
class RoundReport:
    t: int
    task: int
    gamma: float
    gamma_ad: float
    gamma_exact: float
    lambda_i: np.ndarray
    alpha_i: np.ndarray
    beta_i: np.ndarray
    transference_count: int
    interference_count: int
    degenerate_count: int
    beta_t: float
    bias_m_hat: float = float("nan")
    overfit_B: float | None = None
    grad_f_norm_sq: float = float("nan")
    grad_g_norm_sq: float = float("nan")
    grad_h_norm_sq: float = float("nan")
    grad_hhat_norm_sq: float = float("nan")
    memory_ratio_r: float = float("nan")
    details: dict = field(default_factory=dict, repr=False)


def weighted_sum(weights: Sequence[float], vectors: Sequence[np.ndarray]) -> np.ndarray:
    """``sum_i w_i v_i`` accumulated in the given order."""
    acc = np.zeros_like(np.asarray(vectors[0], dtype=np.float64))
    for w, v in zip(weights, vectors):
        acc = acc + w * v
    return acc


def broadcast_grads(server: ServerState, results: Sequence[PrologueResult]):
    """Weighted global current-task gradient and memory gradient.

    The memory gradient is ``None`` while no client holds a buffer.
    """
    if len(results) != server.N:
        raise ConfigurationError(f"expected {server.N} prologue results, got {len(results)}")
    results = sorted(results, key=lambda r: r.client_id)
    ids = [r.client_id for r in results]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("duplicate client ids in prologue results")
    w = [r.weight for r in results]
    g = weighted_sum(w, [r.grad_g for r in results])
    have_f = [r.grad_f_tilde is not None for r in results]
    if any(have_f) and not all(have_f):
        missing = [r.client_id for r in results if r.grad_f_tilde is None]
        raise ConfigurationError(f"clients {missing} sent no memory gradient")
    f = weighted_sum(w, [r.grad_f_tilde for r in results]) if all(have_f) else None
    return g, f


def adap_lr(lambda_i: float, f_tilde_norm_sq: float, S_norm_sq: float, alpha: float,
            L: float, p_i: float, N: int, case: str = "average",
            beta: float | None = None) -> AdaptedRates:
    """Per-client rates from the sign of ``lambda_i = <f_tilde, S_i>``.

    Interference (``lambda_i <= 0``) raises the memory rate and keeps the
    current-task rate at ``beta`` (``alpha`` when not given). Transference
    keeps ``alpha`` and moves the current-task rate to the vertex of the
    client's forgetting surrogate. Zero denominators, or a nonpositive vertex
    when ``L*alpha >= 1``, fall back to the base rates with ``degenerate`` set.
    """
    if case not in CASES:
        raise ConfigurationError(f"unknown adaptation case {case!r}")
    if beta is None:
        beta = alpha
    if lambda_i <= 0:
        if lambda_i == 0:
            return AdaptedRates(alpha, beta, False)
        if not f_tilde_norm_sq > 0:
            return AdaptedRates(alpha, beta, False, True)
        return AdaptedRates(alpha * (1.0 - lambda_i / f_tilde_norm_sq), beta, False)
    denom = L * p_i * S_norm_sq * (N if case == "worst" else 1)
    if not denom > 0 or L * alpha >= 1.0:
        return AdaptedRates(alpha, beta, True, True)
    return AdaptedRates(alpha, (1.0 - L * alpha) * lambda_i / denom, True)


def server_aggregate(server: ServerState, deltas: Sequence[np.ndarray],
                     weights: Sequence[float] | None = None) -> np.ndarray:
    if len(deltas) != server.N:
        raise ConfigurationError(f"expected {server.N} client updates, got {len(deltas)}")
    if weights is None:
        weights = [1.0 / server.N] * server.N
    return weighted_sum(weights, deltas)


def gamma(beta: float, alpha: float, L: float, weighted_S, f_tilde) -> float:
    """Forgetting functional ``(L b^2/2)||S||^2 - b(1 - L a)<f_tilde, S>`` at one rate pair."""
    weighted_S = np.asarray(weighted_S)
    quad = float(weighted_S @ weighted_S)
    lam = float(np.asarray(f_tilde) @ weighted_S)
    return 0.5 * L * beta * beta * quad - beta * (1.0 - L * alpha) * lam


def gamma_surrogate(case: str, alpha_i: float, beta_i: float, L: float, p_i: float, N: int,
                    S_i, f_tilde) -> float:
    """One client's share of the forgetting term with inter-client products dropped
    (``average``) or bounded by Cauchy-Schwarz (``worst``, extra factor ``N``)."""
    if case not in CASES:
        raise ConfigurationError(f"unknown adaptation case {case!r}")
    S_i = np.asarray(S_i)
    scale = p_i * (N if case == "worst" else 1)
    lam = float(np.asarray(f_tilde) @ S_i)
    return 0.5 * L * beta_i * beta_i * scale * float(S_i @ S_i) - beta_i * (1.0 - L * alpha_i) * lam


def overfit_B(alpha: float, beta: float, L: float, grad_f_full, bias_vec, weighted_S) -> float:
    bias_vec = np.asarray(bias_vec)
    return ((L * alpha * alpha - alpha) * float(np.asarray(grad_f_full) @ bias_vec)
            + beta * float(bias_vec @ np.asarray(weighted_S)))


def _map(executor: Executor | None, fn, items):
    if executor is None:
        return [fn(it) for it in items]
    return list(executor.map(fn, items))


def run_round(server: ServerState, clients: Sequence[ClientState], model: mc.LossModel,
              executor: Executor | None = None) -> tuple[np.ndarray, RoundReport]:
    """One communication round; advances ``server.x`` and ``server.t``.

    Client work goes through ``executor`` when one is given; every merge
    happens in ascending client id so results do not depend on scheduling.
    """
    clients = sorted(clients, key=lambda c: c.id)
    if len(clients) != server.N:
        raise ConfigurationError(f"server expects {server.N} clients, got {len(clients)}")
    x_t = server.x
    beta = server.beta_t
    alpha = server.alpha
    p = [c.weight for c in clients]

    pro = _map(executor, lambda c: client_prologue(c, model, x_t), clients)
    g, f_tilde = broadcast_grads(
        server, [PrologueResult(c.id, c.weight, gi, fi) for c, (gi, fi) in zip(clients, pro)])

    if server.local_rule == "plain":
        def work(c):
            return plain_local_round(c, model, x_t, beta, server.E)
    else:
        def work(c):
            return local_round(c, model, x_t, g, beta, server.E, rng=c.rng_stream(server.t),
                               diagnostics=server.grad_error_diag)
    results: list[LocalRoundResult] = _map(executor, work, clients)
    for r, (_, fi) in zip(results, pro):
        r.f_tilde_i_at_xt = fi

    f_vec = f_tilde if f_tilde is not None else np.zeros_like(x_t)
    f_sq = float(f_vec @ f_vec)
    lam, a_i, b_i, kinds, degen, deltas = [], [], [], [], [], []
    for c, r in zip(clients, results):
        li = float(f_vec @ r.S_i)
        if server.adap_flag and f_tilde is not None:
            rates = adap_lr(li, f_sq, float(r.S_i @ r.S_i), alpha, server.L, c.weight,
                            server.N, server.case, beta=beta)
        else:
            rates = AdaptedRates(alpha, beta, li > 0)
        lam.append(li)
        a_i.append(rates.alpha)
        b_i.append(rates.beta)
        kinds.append(rates.transference)
        degen.append(rates.degenerate)
        if server.local_rule == "plain":
            d = r.x_end if f_tilde is None else r.x_end - rates.alpha * f_tilde
        else:
            d = compose_update(r, x_t, g, f_tilde, rates.alpha, rates.beta, beta)
        deltas.append(d)
    x_next = server_aggregate(server, deltas, p)

    weighted_S = weighted_sum(p, [r.S_i for r in results])
    L, N, case = server.L, server.N, server.case
    gam = sum(pi * gamma_surrogate(case, alpha, beta, L, pi, N, r.S_i, f_vec)
              for pi, r in zip(p, results))
    gam_ad = sum(pi * gamma_surrogate(case, ai, bi, L, pi, N, r.S_i, f_vec)
                 for pi, ai, bi, r in zip(p, a_i, b_i, results))
    report = RoundReport(
        t=server.t, task=server.task,
        gamma=float(gam), gamma_ad=float(gam_ad),
        gamma_exact=gamma(beta, alpha, L, weighted_S, f_vec),
        lambda_i=np.array(lam), alpha_i=np.array(a_i), beta_i=np.array(b_i),
        transference_count=int(sum(kinds)), interference_count=int(N - sum(kinds)),
        degenerate_count=int(sum(degen)), beta_t=beta,
        grad_g_norm_sq=float(g @ g),
        details={"x_t": x_t, "grad_g": g, "f_tilde": f_tilde, "weighted_S": weighted_S,
                 "results": results, "deltas": deltas},
    )
    if server.diagnostics:
        _diagnose(report, server, clients, model, x_t, g, f_tilde, weighted_S, beta)
    server.x = x_next
    server.t += 1
    return x_next, report


def _diagnose(report, server, clients, model, x_t, g, f_tilde, weighted_S, beta):
    p = [c.weight for c in clients]
    n_cur = sum(c.current.n for c in clients)
    if f_tilde is None:
        report.grad_h_norm_sq = report.grad_hhat_norm_sq = float(g @ g)
        return
    n_mem = sum(len(c.memory) for c in clients)
    hhat = (n_mem * f_tilde + n_cur * g) / (n_mem + n_cur)
    report.grad_hhat_norm_sq = float(hhat @ hhat)
    g_norm = math.sqrt(float(g @ g))
    ratios = [np.linalg.norm(c_res.f_tilde_i_at_xt) for c_res in report.details["results"]]
    report.memory_ratio_r = float(max(ratios) / g_norm) if g_norm > 0 else float("inf")
    pasts = [c.past for c in clients]
    if any(pd is None for pd in pasts):
        return
    grad_f = weighted_sum(p, [mc.grad(model, x_t, pd) for pd in pasts])
    n_past = sum(pd.n for pd in pasts)
    h = (n_past * grad_f + n_cur * g) / (n_past + n_cur)
    bias = f_tilde - grad_f
    report.grad_f_norm_sq = float(grad_f @ grad_f)
    report.grad_h_norm_sq = float(h @ h)
    report.bias_m_hat = bias_ratio(bias, grad_f)
    report.overfit_B = overfit_B(server.alpha, beta, server.L, grad_f, bias, weighted_S)
    report.details["grad_f"] = grad_f


@dataclass(frozen=True)
class MemoryConfig:
    size: int
    policy: str = "uniform"
    per_task: bool = True


def memory_seed(global_seed: int, client_id: int, task: int, source_task: int):
    return np.random.SeedSequence([global_seed, 0x6D656D, client_id, task, source_task])


def rebuild_memory(client: ClientState, mem: MemoryConfig):
    if mem.per_task:
        seeds = [memory_seed(client.global_seed, client.id, client.task, s)
                 for s in range(len(client.past_tasks))]
        return build_task_memory(client.past_tasks, mem.size, mem.policy, seeds)
    return build_memory(client.past, mem.size, mem.policy,
                        memory_seed(client.global_seed, client.id, client.task, -1))


def reweight(clients: Sequence[ClientState]) -> None:
    """``p_i = |C^i| / |C|``."""
    total = sum(c.current.n for c in clients)
    for c in clients:
        c.weight = c.current.n / total


def task_transition(server: ServerState, clients: Sequence[ClientState],
                    new_task_shards: Sequence[mc.Dataset], mem: MemoryConfig) -> None:
    """Retire the current task into each client's past pool and install the next shard."""
    clients = sorted(clients, key=lambda c: c.id)
    if len(new_task_shards) != len(clients):
        raise ConfigurationError(
            f"{len(new_task_shards)} shards for {len(clients)} clients")
    for c, shard in zip(clients, new_task_shards):
        c.past_tasks.append(c.current)
        c.task += 1
        c.memory = rebuild_memory(c, mem)
        c.current = shard
        c.iag = None
    reweight(clients)
    server.task += 1
    server.t = 0
