"""One client's local round: prologue gradients, E IAG steps, update composition."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as mc
from .errors import ConfigurationError
from .iag import IagState, delayed_grad, gradient_error, iag_accumulate, iag_init, iag_refresh
from .memory import RingBuffer, memory_gradient


def client_rng(global_seed: int, client_id: int, task: int, round_: int) -> np.random.Generator:
    """Sampling stream keyed only by (seed, client, task, round)."""
    return np.random.default_rng(np.random.SeedSequence([global_seed, client_id, task, round_]))


@dataclass
class ClientState:
    id: int
    weight: float
    current: mc.Dataset
    memory: RingBuffer | None = None
    past_tasks: list[mc.Dataset] = field(default_factory=list)
    iag: IagState | None = None
    global_seed: int = 0
    task: int = 0

    def rng_stream(self, round_: int) -> np.random.Generator:
        return client_rng(self.global_seed, self.id, self.task, round_)

    @property
    def past(self) -> mc.Dataset | None:
        if not self.past_tasks:
            return None
        return mc.Dataset.concat(self.past_tasks)


@dataclass
class LocalRoundResult:
    x_end: np.ndarray
    S_i: np.ndarray
    g_i_at_xt: np.ndarray
    f_tilde_i_at_xt: np.ndarray | None
    drift_norms: np.ndarray          # ||x_{t,k} - x_t|| for k = 0..E-1
    iterates: np.ndarray             # x_{t,0..E}, shape (E+1, d)
    delayed: np.ndarray              # aggregate used at each step, (E, d)
    taus: np.ndarray                 # tau snapshot at each step, (E, n)
    samples: np.ndarray              # component drawn at k = 1..E-1
    grad_errors: np.ndarray | None = None

    @property
    def E(self) -> int:
        return self.drift_norms.shape[0]


def client_prologue(client: ClientState, model: mc.LossModel, x_t):
    """Exact current-task gradient and memory gradient at the round-start model.

    The memory gradient is ``None`` when the client has no buffer yet (first task).
    """
    if client.current is None or client.current.n == 0:
        raise ConfigurationError(f"client {client.id} has no current-task data")
    g_i = mc.grad(model, x_t, client.current)
    f_i = None
    if client.memory is not None:
        f_i = memory_gradient(model, x_t, client.memory)
    return g_i, f_i


def local_round(client: ClientState, model: mc.LossModel, x_t, grad_g_global, beta: float,
                E: int, rng: np.random.Generator | None = None, f_tilde_i=None,
                diagnostics: bool = False, round_: int = 0,
                schedule=None) -> LocalRoundResult:
    """Run E local IAG steps from ``x_t``.

    Step 0 uses the fresh full gradient. At each later step one component,
    drawn uniformly with replacement, is refreshed at the current iterate
    before the step is taken. ``schedule`` overrides the random draws with
    explicit component indices for steps 1..E-1.
    """
    if E < 1:
        raise ConfigurationError("E must be >= 1")
    if not beta > 0:
        raise ConfigurationError("beta must be > 0")
    if rng is None and schedule is None:
        rng = client.rng_stream(round_)
    x_t = np.asarray(x_t, dtype=np.float64)
    state = iag_init(model, x_t, client.current)
    client.iag = state
    g_i = state.aggregate.copy()
    correction = np.asarray(grad_g_global) - g_i
    n = state.size
    iterates = [x_t.copy()]
    delayed, taus, errs = [], [], []
    if schedule is None:
        samples = rng.integers(0, n, size=E - 1)
    else:
        samples = np.asarray(schedule, dtype=np.int64)
        if samples.shape != (E - 1,):
            raise ConfigurationError(f"schedule needs {E - 1} entries")
    x = x_t.copy()
    for k in range(E):
        if k >= 1:
            iag_refresh(state, int(samples[k - 1]), x, k)
        d = delayed_grad(state).copy()
        delayed.append(d)
        taus.append(state.tau.copy())
        if diagnostics:
            errs.append(gradient_error(state, model, x))
        iag_accumulate(state)
        x = x - beta * (correction + d)
        iterates.append(x.copy())
    iterates = np.array(iterates)
    drift = np.linalg.norm(iterates[:E] - x_t, axis=1)
    return LocalRoundResult(
        x_end=x,
        S_i=state.accum_S.copy(),
        g_i_at_xt=g_i,
        f_tilde_i_at_xt=f_tilde_i,
        drift_norms=drift,
        iterates=iterates,
        delayed=np.array(delayed),
        taus=np.array(taus),
        samples=samples,
        grad_errors=np.array(errs) if diagnostics else None,
    )


def plain_local_round(client: ClientState, model: mc.LossModel, x_t, beta: float,
                      E: int) -> LocalRoundResult:
    """E full-batch gradient steps on the current data with no drift correction."""
    x_t = np.asarray(x_t, dtype=np.float64)
    x = x_t.copy()
    iterates = [x.copy()]
    grads = []
    for _ in range(E):
        g = mc.grad(model, x, client.current)
        grads.append(g)
        x = x - beta * g
        iterates.append(x.copy())
    iterates = np.array(iterates)
    grads = np.array(grads)
    return LocalRoundResult(
        x_end=x,
        S_i=grads.sum(axis=0),
        g_i_at_xt=grads[0],
        f_tilde_i_at_xt=None,
        drift_norms=np.linalg.norm(iterates[:E] - x_t, axis=1),
        iterates=iterates,
        delayed=grads,
        taus=np.zeros((E, 0), dtype=np.int64),
        samples=np.zeros(0, dtype=np.int64),
    )


def compose_update(result: LocalRoundResult, x_t, grad_g_global, f_tilde_global,
                   alpha_i: float, beta_i: float, beta_base: float) -> np.ndarray:
    """Model a client transmits after its local round.

    ``x_t - beta_base*E*(grad g - grad g_i) - beta_i*S_i - alpha_i*f_tilde``.
    Only the accumulated-gradient part of the drift is rescaled; when
    ``beta_i == beta_base`` the iterated ``x_end`` is used as is. A ``None``
    memory gradient drops the memory term.
    """
    if beta_i == beta_base:
        x = result.x_end
    else:
        corr = np.asarray(grad_g_global) - result.g_i_at_xt
        x = np.asarray(x_t) - beta_base * result.E * corr - beta_i * result.S_i
    if f_tilde_global is not None and alpha_i != 0.0:
        x = x - alpha_i * np.asarray(f_tilde_global)
    return np.array(x, dtype=np.float64)
