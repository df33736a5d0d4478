"""Incrementally aggregated gradient (IAG) cache for one client's current task.

The cache holds one gradient per sample, each evaluated at the local iterate
recorded in ``tau``. The delayed gradient is the mean of the cache, kept up to
date with O(d) work per refresh.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as mc
from .errors import ConfigurationError


@dataclass
class IagState:
    model: mc.LossModel
    data: mc.Dataset
    cache: np.ndarray          # (n, d)
    tau: np.ndarray            # (n,) local step of the last refresh
    aggregate: np.ndarray      # mean of cache rows
    accum_S: np.ndarray        # sum of aggregates over local steps
    steps_taken: int = 0
    check: bool = False        # recompute the aggregate after every refresh

    @property
    def size(self) -> int:
        return self.cache.shape[0]


def iag_init(model: mc.LossModel, params, data: mc.Dataset, check: bool = False) -> IagState:
    if data.n == 0:
        raise ConfigurationError("IAG cache needs a nonempty dataset")
    cache = mc.component_grads(model, params, data)
    return IagState(
        model=model,
        data=data,
        cache=cache,
        tau=np.zeros(data.n, dtype=np.int64),
        aggregate=cache.mean(axis=0),
        accum_S=np.zeros(model.dim),
        check=check,
    )


def delayed_grad(state: IagState) -> np.ndarray:
    return state.aggregate


def iag_refresh(state: IagState, j: int, params, k: int) -> IagState:
    if not 0 <= j < state.size:
        raise IndexError(f"component {j} out of range for {state.size} samples")
    if k != state.steps_taken + 1:
        raise ValueError(f"refresh at step {k} after step {state.steps_taken}")
    new = mc.grad_component(state.model, params, state.data, j)
    state.aggregate = state.aggregate + (new - state.cache[j]) / state.size
    state.cache[j] = new
    state.tau[j] = k
    state.steps_taken = k
    if state.check:
        ref = state.cache.mean(axis=0)
        err = np.linalg.norm(state.aggregate - ref)
        assert err <= 1e-10 * max(np.linalg.norm(ref), 1e-300), (
            f"incremental aggregate drifted from recompute by {err:.3e}")
    return state


def iag_accumulate(state: IagState) -> IagState:
    state.accum_S = state.accum_S + state.aggregate
    return state


def gradient_error(state: IagState, model: mc.LossModel, params) -> float:
    """``||delayed_grad - grad g_i(params)||``, the staleness error of the cache."""
    return float(np.linalg.norm(state.aggregate - mc.grad(model, params, state.data)))
