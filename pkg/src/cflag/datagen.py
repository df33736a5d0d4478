"""Synthetic continual-task streams, Dirichlet client partitioning and CSV I/O."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ParseError
from .model import Dataset


@dataclass(frozen=True)
class TaskStream:
    tasks: list[Dataset]
    classes_per_task: int
    num_classes: int

    def __len__(self) -> int:
        return len(self.tasks)

    def task_classes(self, s: int) -> np.ndarray:
        return self.tasks[s].classes()


@dataclass(frozen=True)
class PartitionSpec:
    N: int
    zeta: float
    seed: int = 0

    def __post_init__(self):
        if self.N < 1:
            raise ConfigurationError("partition needs N >= 1 clients")
        if not self.zeta > 0:
            raise ConfigurationError("Dirichlet concentration zeta must be > 0")


def make_split_gaussians(num_tasks: int, classes_per_task: int, dim: int,
                         n_per_class: int, separation: float, seed: int,
                         std: float = 1.0) -> TaskStream:
    """Isotropic Gaussian clusters, fresh class ids per task.

    Cluster means are uniform on the sphere of radius ``separation``; class
    ``s * classes_per_task + c`` belongs to task ``s``.
    """
    if min(num_tasks, classes_per_task, dim, n_per_class) < 1:
        raise ConfigurationError("all counts must be >= 1")
    if not separation > 0:
        raise ConfigurationError("separation must be > 0")
    rng = np.random.default_rng(seed)
    K = num_tasks * classes_per_task
    means = rng.standard_normal((K, dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    tasks = []
    for s in range(num_tasks):
        X, y = [], []
        for c in range(classes_per_task):
            label = s * classes_per_task + c
            X.append(means[label] + std * rng.standard_normal((n_per_class, dim)))
            y.append(np.full(n_per_class, label))
        tasks.append(Dataset(np.concatenate(X), np.concatenate(y)))
    return TaskStream(tasks, classes_per_task, K)


def task_permutations(dim: int, num_tasks: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    perms = [np.arange(dim)]
    for _ in range(1, num_tasks):
        perms.append(rng.permutation(dim))
    return perms


def make_permuted_features(base: Dataset, num_tasks: int, seed: int) -> TaskStream:
    """Task ``s`` sees the base features with columns reordered by a fixed permutation.

    Task 0 uses the identity. Labels are shared across tasks.
    """
    if num_tasks < 1:
        raise ConfigurationError("num_tasks must be >= 1")
    tasks = []
    for perm in task_permutations(base.p, num_tasks, seed):
        tasks.append(Dataset(base.features[:, perm], base.labels, base.targets))
    K = int(base.labels.max()) + 1 if base.n else 0
    return TaskStream(tasks, len(base.classes()), K)


def _largest_remainder(props: np.ndarray, total: int) -> np.ndarray:
    raw = props * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        # stable sort keeps ties in ascending client order
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(data: Dataset, spec: PartitionSpec) -> list[Dataset]:
    """Split rows across ``spec.N`` clients with per-class Dirichlet(zeta) proportions.

    Each class gets its own proportion vector; row counts come from
    largest-remainder rounding. Clients left empty receive one row from the
    currently largest shard. Rows keep their original order inside a shard.
    """
    if data.n == 0:
        raise ConfigurationError("cannot partition an empty dataset")
    if data.n < spec.N:
        raise ConfigurationError(
            f"{data.n} rows cannot fill {spec.N} nonempty client shards")
    rng = np.random.default_rng(spec.seed)
    owner = np.empty(data.n, dtype=np.int64)
    for c in data.classes():
        rows = np.flatnonzero(data.labels == c)
        props = rng.dirichlet(np.full(spec.N, float(spec.zeta)))
        props = np.nan_to_num(props, nan=0.0)
        if props.sum() <= 0:
            props = np.full(spec.N, 1.0 / spec.N)
        counts = _largest_remainder(props / props.sum(), rows.size)
        rows = rng.permutation(rows)
        owner[rows] = np.repeat(np.arange(spec.N), counts)
    sizes = np.bincount(owner, minlength=spec.N)
    while np.any(sizes == 0):
        dst = int(np.flatnonzero(sizes == 0)[0])
        src = int(np.argmax(sizes))
        moved = np.flatnonzero(owner == src)[-1]
        owner[moved] = dst
        sizes[src] -= 1
        sizes[dst] += 1
    return [data.subset(np.flatnonzero(owner == i)) for i in range(spec.N)]


def train_test_split(data: Dataset, test_fraction: float, seed) -> tuple[Dataset, Dataset]:
    """Per-class random split; every class with >= 2 rows keeps at least one of each."""
    if not 0 <= test_fraction < 1:
        raise ConfigurationError("test_fraction must be in [0, 1)")
    rng = np.random.default_rng(seed)
    test = np.zeros(data.n, dtype=bool)
    for c in data.classes():
        rows = rng.permutation(np.flatnonzero(data.labels == c))
        k = int(round(test_fraction * rows.size))
        if test_fraction > 0 and rows.size >= 2:
            k = min(max(k, 1), rows.size - 1)
        test[rows[:k]] = True
    return data.subset(np.flatnonzero(~test)), data.subset(np.flatnonzero(test))


# ---------------------------------------------------------------- CSV

def _fmt(v: float) -> str:
    return repr(float(v))


def write_csv(path, data: Dataset, header: bool = True) -> Path:
    """Features, optional ``target`` column, then the integer label last."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            cols = [f"x{j}" for j in range(data.p)]
            if data.targets is not None:
                cols.append("target")
            w.writerow(cols + ["label"])
        for i in range(data.n):
            row = [_fmt(v) for v in data.features[i]]
            if data.targets is not None:
                row.append(_fmt(data.targets[i]))
            row.append(str(int(data.labels[i])))
            w.writerow(row)
    return path


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def read_csv(path) -> Dataset:
    """Inverse of :func:`write_csv`; a non-numeric first row is taken as a header."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [(i + 1, r) for i, r in enumerate(csv.reader(fh)) if r]
    if not rows:
        raise ParseError(f"{path} is empty")
    has_target = False
    if not all(_is_number(c) for c in rows[0][1]):
        has_target = "target" in [c.strip() for c in rows[0][1]]
        rows = rows[1:]
    if not rows:
        raise ParseError(f"{path} has a header but no data rows")
    width = len(rows[0][1])
    min_width = 3 if has_target else 2
    if width < min_width:
        raise ParseError(f"need at least {min_width} columns, found {width}", rows[0][0])
    X, t, y = [], [], []
    for line, r in rows:
        if len(r) != width:
            raise ParseError(f"expected {width} columns, found {len(r)}", line)
        try:
            vals = [float(c) for c in r[:-1]]
            lab = float(r[-1])
        except ValueError as exc:
            raise ParseError(str(exc), line) from None
        if lab != int(lab) or lab < 0:
            raise ParseError(f"label {r[-1]!r} is not a nonnegative integer", line)
        if has_target:
            t.append(vals.pop())
        X.append(vals)
        y.append(int(lab))
    return Dataset(np.array(X), np.array(y, dtype=np.int64), np.array(t) if has_target else None)


def shard_filename(task: int, client: int) -> str:
    return f"task{task}_client{client}.csv"


def export_shards(out_dir, shards: Sequence[Sequence[Dataset]]) -> list[Path]:
    """``shards[s][i]`` is written to ``out_dir/task{s}_client{i}.csv``."""
    out = []
    for s, per_client in enumerate(shards):
        for i, d in enumerate(per_client):
            out.append(write_csv(Path(out_dir) / shard_filename(s, i), d))
    return out
