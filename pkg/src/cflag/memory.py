"""Fixed-capacity episodic memory built from past-task data."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import model as mc
from .datagen import read_csv, write_csv
from .errors import ConfigurationError

POLICIES = ("uniform", "class-balanced")


@dataclass(frozen=True)
class RingBuffer:
    capacity: int
    items: mc.Dataset
    policy: str
    source_size: int
    frozen: bool = True

    def __len__(self) -> int:
        return self.items.n


def reservoir_indices(n: int, m0: int, rng: np.random.Generator) -> np.ndarray:
    """Algorithm R over ``range(n)``; returned indices are sorted."""
    if n <= m0:
        return np.arange(n)
    res = np.arange(m0)
    draws = rng.integers(0, np.arange(m0 + 1, n + 1))
    for i, j in enumerate(draws, start=m0):
        if j < m0:
            res[j] = i
    return np.sort(res)


def class_quotas(counts: dict[int, int], m0: int) -> dict[int, int]:
    """Split ``m0`` slots evenly over classes in ascending id order.

    The remainder goes one slot each to the lowest class ids. A class with
    fewer rows than its quota keeps all its rows and the unused slots are
    offered to the remaining classes the same way.
    """
    quota = {c: 0 for c in counts}
    open_ = sorted(c for c in counts if counts[c] > 0)
    left = m0
    while left > 0 and open_:
        base, extra = divmod(left, len(open_))
        nxt = []
        for i, c in enumerate(open_):
            take = min(base + (1 if i < extra else 0), counts[c] - quota[c])
            quota[c] += take
            left -= take
            if quota[c] < counts[c]:
                nxt.append(c)
        open_ = nxt
    return quota


def build_memory(past: mc.Dataset, m0: int, policy: str = "uniform", seed=None) -> RingBuffer:
    if m0 < 1:
        raise ConfigurationError("memory capacity m0 must be >= 1")
    if past.n == 0:
        raise ConfigurationError("cannot build memory from an empty past dataset")
    if policy not in POLICIES:
        raise ConfigurationError(f"unknown memory policy {policy!r}")
    rng = np.random.default_rng(seed)
    if m0 >= past.n:
        idx = np.arange(past.n)
    elif policy == "uniform":
        idx = reservoir_indices(past.n, m0, rng)
    else:
        classes = past.classes()
        rows = {int(c): np.flatnonzero(past.labels == c) for c in classes}
        quota = class_quotas({c: r.size for c, r in rows.items()}, m0)
        idx = np.sort(np.concatenate([
            r[reservoir_indices(r.size, quota[c], rng)] for c, r in rows.items()]))
    return RingBuffer(capacity=m0, items=past.subset(idx), policy=policy, source_size=past.n)


def build_task_memory(past_tasks: Sequence[mc.Dataset], m0_per_task: int,
                      policy: str = "uniform", seeds: Sequence | None = None) -> RingBuffer:
    """One sub-buffer of ``m0_per_task`` rows per past task, concatenated in task order."""
    parts = [d for d in past_tasks if d is not None and d.n > 0]
    if not parts:
        raise ConfigurationError("no past-task data to build memory from")
    if seeds is None:
        seeds = [None] * len(parts)
    subs = [build_memory(d, m0_per_task, policy, s).items for d, s in zip(parts, seeds)]
    return RingBuffer(capacity=m0_per_task * len(parts), items=mc.Dataset.concat(subs),
                      policy=policy, source_size=sum(d.n for d in parts))


def memory_gradient(model: mc.LossModel, params, buffer: RingBuffer,
                    batch_size: int | None = None, rng=None) -> np.ndarray:
    """Gradient of the loss on the buffer; ``batch_size`` draws a minibatch instead."""
    if buffer is None or len(buffer) == 0:
        raise ConfigurationError("memory gradient of an empty buffer")
    data = buffer.items
    if batch_size is not None and batch_size < data.n:
        rng = np.random.default_rng(rng)
        data = data.subset(np.sort(rng.choice(data.n, size=batch_size, replace=False)))
    return mc.grad(model, params, data)


def bias_ratio(bias_vec: np.ndarray, grad_f: np.ndarray) -> float:
    b2 = float(bias_vec @ bias_vec)
    g2 = float(grad_f @ grad_f)
    if g2 == 0.0:
        return 0.0 if b2 == 0.0 else float("inf")
    return b2 / g2


def bias_diagnostic(model: mc.LossModel, params, buffer: RingBuffer,
                    past: mc.Dataset) -> tuple[np.ndarray, float]:
    """Memory-gradient bias against the full past gradient and its squared-norm ratio."""
    if past.n == 0:
        raise ConfigurationError("bias needs a nonempty past dataset")
    g = mc.grad(model, params, past)
    b = memory_gradient(model, params, buffer) - g
    return b, bias_ratio(b, g)


def save_buffer(path, buffer: RingBuffer):
    return write_csv(path, buffer.items)


def load_buffer(path, capacity: int | None = None, policy: str = "uniform") -> RingBuffer:
    items = read_csv(path)
    return RingBuffer(capacity=capacity or items.n, items=items, policy=policy,
                      source_size=items.n)
