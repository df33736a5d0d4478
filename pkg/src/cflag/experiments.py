"""Experiment configuration, continual-learning metrics and run orchestration."""
from __future__ import annotations

import csv
import json
import math
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import model as mc
from .client import ClientState
from .datagen import (PartitionSpec, TaskStream, dirichlet_partition, make_permuted_features,
                      make_split_gaussians, read_csv, train_test_split)
from .errors import ConfigurationError
from .memory import POLICIES
from .server import (CASES, SCHEDULES, MemoryConfig, RoundReport, ServerState, reweight,
                     run_round, task_transition)

SCHEMA_VERSION = 1
ALGORITHMS = ("cflag-fixed", "cflag-adaptive", "fine-fl", "fedtrack")
OUTPUT_ROOT_ENV = "CFLAG_OUTPUT_ROOT"

TRACE_COLUMNS = ["t", "task", "gamma", "gamma_ad", "lambda_min", "lambda_max", "n_transfer",
                 "n_interfere", "grad_f_sq", "grad_g_sq", "grad_h_sq", "m_hat"]
TRACE_EXTRA = ["round", "gamma_exact", "grad_hhat_sq", "overfit_B", "beta_t", "alpha_mean",
               "beta_mean", "r_ratio", "n_degenerate"]


# ---------------------------------------------------------------- metrics

class AccuracyMatrix:
    """``a[i][j]``: accuracy on task ``j`` after training task ``i`` (``j <= i``)."""

    def __init__(self, S: int):
        self.a = np.full((S, S), np.nan)

    @classmethod
    def from_rows(cls, rows) -> "AccuracyMatrix":
        S = len(rows)
        m = cls(S)
        for i, row in enumerate(rows):
            for j, v in enumerate(row):
                if j <= i and v is not None and not (isinstance(v, float) and math.isnan(v)):
                    if not 0.0 <= v <= 1.0:
                        raise ValueError(f"accuracy {v} outside [0, 1]")
                    m.a[i, j] = v
        return m

    @property
    def S(self) -> int:
        return self.a.shape[0]

    def set(self, i: int, j: int, value: float) -> None:
        if j > i:
            raise IndexError("a[i][j] is only defined for j <= i")
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"accuracy {value!r} outside [0, 1]")
        self.a[i, j] = value

    def rows(self) -> list[list[float | None]]:
        return [[None if j > i or math.isnan(self.a[i, j]) else float(self.a[i, j])
                 for j in range(self.S)] for i in range(self.S)]


def _as_matrix(matrix) -> np.ndarray:
    if isinstance(matrix, AccuracyMatrix):
        return matrix.a
    return AccuracyMatrix.from_rows(matrix).a


def avg_accuracy(matrix, S: int | None = None) -> float:
    a = _as_matrix(matrix)
    S = a.shape[0] if S is None else S
    last = a[S - 1, :S]
    if np.any(np.isnan(last)):
        raise ValueError(f"row {S - 1} of the accuracy matrix is not fully populated")
    return float(last.mean())


def forgetting(matrix, S: int | None = None) -> float:
    """Mean drop from just-after-training accuracy to final accuracy over the first S-1 tasks."""
    a = _as_matrix(matrix)
    S = a.shape[0] if S is None else S
    if S < 2:
        raise ValueError("forgetting needs at least two tasks")
    drops = [a[i, i] - a[S - 1, i] for i in range(S - 1)]
    if any(math.isnan(d) for d in drops):
        raise ValueError("diagonal or last row of the accuracy matrix is not populated")
    return float(sum(drops) / (S - 1))


# ---------------------------------------------------------------- config

@dataclass
class ModelSpec:
    kind: str = "multinomial-logistic"
    hidden_dim: int | None = None
    l2_coeff: float = 0.0
    init_scale: float = 0.1


@dataclass
class StreamSpec:
    kind: str = "split-gaussians"       # split-gaussians | permuted-gaussians | csv
    num_tasks: int = 2
    classes_per_task: int = 2
    dim: int = 2
    n_per_class: int = 100
    separation: float = 5.0
    std: float = 1.0
    csv_paths: list[str] = field(default_factory=list)


@dataclass
class ExperimentConfig:
    algorithm: str = "cflag-adaptive"
    model: ModelSpec = field(default_factory=ModelSpec)
    stream: StreamSpec = field(default_factory=StreamSpec)
    num_clients: int = 5
    zeta: float = 0.1
    rounds: int = 20                    # T per task
    local_steps: int = 2                # E
    alpha: float = 0.01
    beta: float = 0.01
    beta_schedule: str = "constant"
    c: float | None = None
    L: float | str = "analytic"
    m: float = 0.0
    memory_size: int = 50
    memory_policy: str = "uniform"
    memory_per_task: bool = True
    case: str = "average"
    seed: int = 0
    test_fraction: float = 0.2
    eval_mode: str = "class"            # "task": argmax over the task's classes only
    task_rates: dict[str, dict[str, float]] = field(default_factory=dict)
    diagnostics: bool = True
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        d = dict(d)
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported schema_version {version!r}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {unknown}")
        try:
            if "model" in d:
                d["model"] = ModelSpec(**d["model"])
            if "stream" in d:
                d["stream"] = StreamSpec(**d["stream"])
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def rates_for(self, task: int) -> dict[str, float]:
        r = {"alpha": self.alpha, "beta": self.beta, "c": self.c}
        r.update(self.task_rates.get(str(task), {}))
        return r


def _derive(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


def build_stream(cfg: ExperimentConfig) -> TaskStream:
    st = cfg.stream
    if st.kind == "split-gaussians":
        return make_split_gaussians(st.num_tasks, st.classes_per_task, st.dim, st.n_per_class,
                                    st.separation, _derive(cfg.seed, 1), st.std)
    if st.kind == "permuted-gaussians":
        base = make_split_gaussians(1, st.classes_per_task, st.dim, st.n_per_class,
                                    st.separation, _derive(cfg.seed, 1), st.std)
        return make_permuted_features(base.tasks[0], st.num_tasks, _derive(cfg.seed, 2))
    if st.kind == "csv":
        if not st.csv_paths:
            raise ConfigurationError("csv stream needs csv_paths")
        tasks = [read_csv(p) for p in st.csv_paths]
        K = int(max(t.labels.max() for t in tasks)) + 1
        return TaskStream(tasks, len(tasks[0].classes()), K)
    raise ConfigurationError(f"unknown stream kind {st.kind!r}")


def build_model(cfg: ExperimentConfig, stream: TaskStream) -> mc.LossModel:
    p = stream.tasks[0].p
    return mc.LossModel(cfg.model.kind, p, max(stream.num_classes, 1),
                        cfg.model.hidden_dim, cfg.model.l2_coeff)


@dataclass
class Setup:
    stream: TaskStream
    model: mc.LossModel
    train_shards: list[list[mc.Dataset]]
    test_sets: list[mc.Dataset]
    L: float


def prepare(cfg: ExperimentConfig) -> Setup:
    """Data, shards and the smoothness constant for a config (no training)."""
    stream = build_stream(cfg)
    model = build_model(cfg, stream)
    shards, tests, train_all = [], [], []
    for s, task in enumerate(stream.tasks):
        train, test = train_test_split(task, cfg.test_fraction, _derive(cfg.seed, 3, s))
        tests.append(test)
        train_all.append(train)
        shards.append(dirichlet_partition(
            train, PartitionSpec(cfg.num_clients, cfg.zeta, _derive(cfg.seed, 4, s))))
    if cfg.L == "analytic":
        L = mc.component_L(model, mc.Dataset.concat(train_all))
    else:
        L = float(cfg.L)
    return Setup(stream, model, shards, tests, L)


def validate(cfg: ExperimentConfig, setup: Setup | None = None) -> Setup:
    """Check a config; raises :class:`ConfigurationError` with the first problem found."""
    if cfg.algorithm not in ALGORITHMS:
        raise ConfigurationError(f"algorithm must be one of {ALGORITHMS}")
    if cfg.case not in CASES:
        raise ConfigurationError(f"case must be one of {CASES}")
    if cfg.beta_schedule not in SCHEDULES:
        raise ConfigurationError(f"beta_schedule must be one of {SCHEDULES}")
    if cfg.memory_policy not in POLICIES:
        raise ConfigurationError(f"memory_policy must be one of {POLICIES}")
    if cfg.eval_mode not in ("task", "class"):
        raise ConfigurationError("eval_mode must be 'task' or 'class'")
    if cfg.num_clients < 1 or cfg.rounds < 1 or cfg.local_steps < 1 or cfg.memory_size < 1:
        raise ConfigurationError("num_clients, rounds, local_steps, memory_size must be >= 1")
    if not (isinstance(cfg.L, (int, float)) and cfg.L > 0) and cfg.L != "analytic":
        raise ConfigurationError("L must be a positive number or 'analytic'")
    if cfg.m < 0:
        raise ConfigurationError("m must be nonnegative")
    if setup is None:
        setup = prepare(cfg)
    for s in range(len(setup.stream)):
        r = cfg.rates_for(s)
        if cfg.beta_schedule == "sqrt" and not (r["c"] and r["c"] > 0):
            raise ConfigurationError("beta_schedule 'sqrt' needs a positive c")
        if cfg.beta_schedule == "constant" and not r["beta"] > 0:
            raise ConfigurationError("beta must be > 0")
        if cfg.algorithm not in ("fedtrack", "fine-fl"):
            limit = 2.0 / (setup.L * (1.0 + cfg.m))
            if not r["alpha"] < limit:
                raise ConfigurationError(
                    f"task {s}: alpha={r['alpha']!r} violates the precondition "
                    f"alpha < 2/(L(1+m)) = {limit!r} with L={setup.L!r}, m={cfg.m!r}")
    return setup


# ---------------------------------------------------------------- running

@dataclass
class RunArtifacts:
    trace: list[dict[str, Any]]
    summary: dict[str, Any]
    config: dict[str, Any]
    accuracy: AccuracyMatrix
    reports: list[RoundReport] = field(default_factory=list, repr=False)
    final_params: np.ndarray | None = None


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _json_clean(o):
    if isinstance(o, dict):
        return {k: _json_clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_json_clean(v) for v in o]
    if isinstance(o, (np.floating, float)):
        f = float(o)
        return None if math.isnan(f) or math.isinf(f) else f
    if isinstance(o, np.integer):
        return int(o)
    return o


def dump_json(obj) -> str:
    return json.dumps(_json_clean(obj), sort_keys=True, indent=2) + "\n"


def trace_columns(S: int) -> list[str]:
    return TRACE_COLUMNS + [f"acc_task_{j}" for j in range(S)] + TRACE_EXTRA


def _evaluate(model, x, setup: Setup, upto: int, eval_mode: str) -> list[float | None]:
    accs: list[float | None] = []
    for j in range(len(setup.stream)):
        if j > upto or not model.is_classifier or setup.test_sets[j].n == 0:
            accs.append(None)
            continue
        classes = setup.stream.task_classes(j) if eval_mode == "task" else None
        accs.append(mc.accuracy(model, x, setup.test_sets[j], classes))
    return accs


def _trace_row(rep: RoundReport, global_round: int, accs) -> dict[str, Any]:
    lam = rep.lambda_i
    row = {
        "t": rep.t, "task": rep.task, "gamma": rep.gamma, "gamma_ad": rep.gamma_ad,
        "lambda_min": float(lam.min()), "lambda_max": float(lam.max()),
        "n_transfer": rep.transference_count, "n_interfere": rep.interference_count,
        "grad_f_sq": rep.grad_f_norm_sq, "grad_g_sq": rep.grad_g_norm_sq,
        "grad_h_sq": rep.grad_h_norm_sq, "m_hat": rep.bias_m_hat,
    }
    for j, a in enumerate(accs):
        row[f"acc_task_{j}"] = a
    row.update({
        "round": global_round, "gamma_exact": rep.gamma_exact,
        "grad_hhat_sq": rep.grad_hhat_norm_sq,
        "overfit_B": rep.overfit_B, "beta_t": rep.beta_t,
        "alpha_mean": float(rep.alpha_i.mean()), "beta_mean": float(rep.beta_i.mean()),
        "r_ratio": rep.memory_ratio_r, "n_degenerate": rep.degenerate_count,
    })
    return row


def run_experiment(cfg: ExperimentConfig, out_dir=None, threads: int = 1,
                   keep_reports: bool = False) -> RunArtifacts:
    """Train over the whole task stream and collect per-round traces and metrics.

    With ``out_dir`` the artifacts are staged next to it while the run is in
    progress (trace flushed every round) and moved into place at the end;
    a failed run leaves nothing behind.
    """
    setup = validate(cfg)
    staging = None
    trace_fh = None
    cols = trace_columns(len(setup.stream))
    if out_dir is not None:
        out_dir = Path(out_dir)
        staging = out_dir.parent / f".{out_dir.name}.partial"
        if staging.exists():
            shutil.rmtree(staging)
        staging.mkdir(parents=True)
        trace_fh = (staging / "trace.csv").open("w", newline="")
        trace_fh.write(",".join(cols) + "\n")
        trace_fh.flush()
    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        art = _run(cfg, setup, executor, trace_fh, cols, keep_reports)
        if staging is not None:
            trace_fh.close()
            trace_fh = None
            write_artifacts(staging, art, trace_written=True)
            out_dir.mkdir(parents=True, exist_ok=True)
            for f in staging.iterdir():
                os.replace(f, out_dir / f.name)
            staging.rmdir()
        return art
    except BaseException:
        if trace_fh is not None:
            trace_fh.close()
        if staging is not None and staging.exists():
            shutil.rmtree(staging)
        raise
    finally:
        if executor is not None:
            executor.shutdown()


def _run(cfg, setup: Setup, executor, trace_fh, cols, keep_reports) -> RunArtifacts:
    model = setup.model
    S, T, N = len(setup.stream), cfg.rounds, cfg.num_clients
    clients = [ClientState(i, 0.0, setup.train_shards[0][i], global_seed=cfg.seed)
               for i in range(N)]
    reweight(clients)
    r0 = cfg.rates_for(0)
    server = ServerState(
        x=mc.init_params(model, _derive(cfg.seed, 5), cfg.model.init_scale),
        alpha=r0["alpha"], beta=r0["beta"], L=setup.L, E=cfg.local_steps, N=N,
        beta_schedule=cfg.beta_schedule, c=r0["c"], T=T, case=cfg.case,
        adap_flag=cfg.algorithm == "cflag-adaptive", m_config=cfg.m,
        local_rule="plain" if cfg.algorithm == "fine-fl" else "iag",
        global_seed=cfg.seed, diagnostics=cfg.diagnostics,
    )
    mem = MemoryConfig(cfg.memory_size, cfg.memory_policy, cfg.memory_per_task)
    acc = AccuracyMatrix(S)
    trace, reports = [], []
    for s in range(S):
        r = cfg.rates_for(s)
        server.alpha = 0.0 if cfg.algorithm in ("fedtrack", "fine-fl") else r["alpha"]
        server.beta, server.c = r["beta"], r["c"]
        for _ in range(T):
            x, rep = run_round(server, clients, model, executor)
            accs = _evaluate(model, x, setup, s, cfg.eval_mode)
            row = _trace_row(rep, s * T + rep.t, accs)
            trace.append(row)
            if keep_reports:
                reports.append(rep)
            if trace_fh is not None:
                trace_fh.write(",".join(_fmt(row[c]) for c in cols) + "\n")
                trace_fh.flush()
        for j in range(s + 1):
            if accs[j] is not None:
                acc.set(s, j, accs[j])
        if s < S - 1:
            task_transition(server, clients, setup.train_shards[s + 1], mem)
    summary = _summarize(cfg, setup, acc, trace, server.x)
    snapshot = cfg.to_dict()
    snapshot["resolved"] = {"L": setup.L, "num_classes": model.num_classes, "dim": model.dim}
    return RunArtifacts(trace, summary, snapshot, acc, reports, server.x.copy())


def _stats(vals) -> dict[str, float | None]:
    v = np.array([x for x in vals if x is not None and not math.isnan(x)])
    if v.size == 0:
        return {"mean": None, "min": None, "max": None}
    return {"mean": float(v.mean()), "min": float(v.min()), "max": float(v.max())}


def _summarize(cfg, setup, acc: AccuracyMatrix, trace, x) -> dict[str, Any]:
    S = acc.S
    classifier = setup.model.is_classifier
    summary = {
        "schema_version": SCHEMA_VERSION,
        "algorithm": cfg.algorithm,
        "seed": cfg.seed,
        "num_tasks": S,
        "rounds_per_task": cfg.rounds,
        "L": setup.L,
        "avg_accuracy": avg_accuracy(acc) if classifier else None,
        "forgetting": forgetting(acc) if classifier and S >= 2 else None,
        "accuracy_matrix": acc.rows(),
        "gamma": _stats(r["gamma"] for r in trace),
        "gamma_ad": _stats(r["gamma_ad"] for r in trace),
        "transference_total": int(sum(r["n_transfer"] for r in trace)),
        "interference_total": int(sum(r["n_interfere"] for r in trace)),
        "degenerate_total": int(sum(r["n_degenerate"] for r in trace)),
        "final_loss": [mc.loss(setup.model, x, t) if t.n else None for t in setup.test_sets],
    }
    return summary


def write_artifacts(out_dir, art: RunArtifacts, trace_written: bool = False) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    S = art.accuracy.S
    if not trace_written:
        cols = trace_columns(S)
        with (out_dir / "trace.csv").open("w", newline="") as fh:
            fh.write(",".join(cols) + "\n")
            for row in art.trace:
                fh.write(",".join(_fmt(row[c]) for c in cols) + "\n")
    with (out_dir / "accuracy_matrix.csv").open("w", newline="") as fh:
        fh.write(",".join(f"task_{j}" for j in range(S)) + "\n")
        for row in art.accuracy.rows():
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    (out_dir / "summary.json").write_text(dump_json(art.summary))
    (out_dir / "config.json").write_text(dump_json(art.config))
    return out_dir


# ---------------------------------------------------------------- reporting

class ReportError(RuntimeError):
    pass


def _read_trace(path: Path) -> list[dict[str, str]]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def read_accuracy_matrix(path) -> AccuracyMatrix:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return AccuracyMatrix.from_rows([[float(v) if v else None for v in r] for r in rows])


def report(run_dir, out_dir=None) -> dict[str, Any]:
    """Recompute metrics from a run directory and write two-column plot data files.

    Raises :class:`ReportError` when the trace is missing rounds.
    """
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir is not None else run_dir
    cfg_path, trace_path = run_dir / "config.json", run_dir / "trace.csv"
    for p in (cfg_path, trace_path):
        if not p.exists():
            raise ReportError(f"missing {p.name} in {run_dir}")
    cfg = json.loads(cfg_path.read_text())
    T = int(cfg["rounds"])
    S = int(cfg["stream"]["num_tasks"]) if cfg["stream"]["kind"] != "csv" \
        else len(cfg["stream"]["csv_paths"])
    rows = _read_trace(trace_path)
    seen = set()
    for r in rows:
        try:
            seen.add((int(r["task"]), int(r["t"])))
        except (TypeError, ValueError, KeyError):
            raise ReportError(f"malformed trace row: {r}") from None
    missing = [(s, t) for s in range(S) for t in range(T) if (s, t) not in seen]
    if missing:
        shown = ", ".join(f"task {s} round {t}" for s, t in missing[:10])
        more = f" (+{len(missing) - 10} more)" if len(missing) > 10 else ""
        raise ReportError(f"trace is missing {len(missing)} rounds: {shown}{more}")
    out_dir.mkdir(parents=True, exist_ok=True)
    gamma_lines, acc_lines, gad_lines = [], [], []
    for r in rows:
        rnd = int(r["round"]) if r.get("round") else int(r["task"]) * T + int(r["t"])
        gamma_lines.append(f"{rnd} {r['gamma']}")
        gad_lines.append(f"{rnd} {r['gamma_ad']}")
        accs = [float(r[f"acc_task_{j}"]) for j in range(S) if r.get(f"acc_task_{j}")]
        if accs:
            acc_lines.append(f"{rnd} {repr(sum(accs) / len(accs))}")
    (out_dir / "gamma.dat").write_text("\n".join(gamma_lines) + "\n")
    (out_dir / "gamma_ad.dat").write_text("\n".join(gad_lines) + "\n")
    (out_dir / "avg_accuracy.dat").write_text("\n".join(acc_lines) + ("\n" if acc_lines else ""))
    result: dict[str, Any] = {"rounds": len(rows), "avg_accuracy": None, "forgetting": None}
    acc_path = run_dir / "accuracy_matrix.csv"
    if acc_path.exists():
        m = read_accuracy_matrix(acc_path)
        if not np.any(np.isnan(m.a[m.S - 1])):
            result["avg_accuracy"] = avg_accuracy(m)
            if m.S >= 2:
                result["forgetting"] = forgetting(m)
    return result


def default_out_dir(cfg: ExperimentConfig, config_path=None) -> Path:
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    stem = Path(config_path).stem if config_path else cfg.algorithm
    return root / f"{stem}-seed{cfg.seed}"
