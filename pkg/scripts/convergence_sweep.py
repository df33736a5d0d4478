"""Running minimum of the joint and past-task gradient norms against the horizon T.

Second task of a two-task linear regression federation. The joint check uses
constant rates ``1/(30 L E)``; the past-task check uses full memory,
``alpha = 1/L`` and ``beta = c / sqrt(T)`` with ``c = 1/(L E)``.

    python scripts/convergence_sweep.py --seeds 5 --horizons 50 100 200 400
"""
import argparse
import sys

import numpy as np

from cflag import model as mc
from cflag.client import ClientState
from cflag.datagen import PartitionSpec, dirichlet_partition
from cflag.model import Dataset, LossModel
from cflag.server import MemoryConfig, ServerState, reweight, run_round, task_transition


def regression_tasks(seed, p=5, n=200):
    rng = np.random.default_rng(seed)
    tasks = []
    for s in range(2):
        X = rng.standard_normal((n, p)) + s * rng.standard_normal(p)
        tasks.append(Dataset(X, np.zeros(n, dtype=np.int64), X @ rng.standard_normal(p)))
    return tasks


def second_task(seed, T, joint, E=2, N=5, warmup=100):
    tasks = regression_tasks(seed)
    shards = [dirichlet_partition(t, PartitionSpec(N, 1.0, seed + s)) for s, t in enumerate(tasks)]
    model = LossModel("linear-mse", tasks[0].p, 1)
    L = mc.component_L(model, Dataset.concat(tasks))
    clients = [ClientState(i, 0.0, shards[0][i], global_seed=seed) for i in range(N)]
    reweight(clients)
    srv = ServerState(x=np.zeros(model.dim), alpha=0.0, beta=1 / (4 * L * E), L=L, E=E, N=N,
                      global_seed=seed)
    for _ in range(warmup):
        run_round(srv, clients, model)
    task_transition(srv, clients, shards[1], MemoryConfig(20 if joint else 10_000))
    if joint:
        srv.alpha = srv.beta = 1 / (30 * L * E)
    else:
        srv.alpha = 1 / L
        srv.beta_schedule, srv.c, srv.T = "sqrt", 1 / (L * E), T
    vals = []
    for _ in range(T):
        _, rep = run_round(srv, clients, model)
        vals.append(rep.grad_hhat_norm_sq if joint else rep.grad_f_norm_sq)
    return float(np.min(vals))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--horizons", type=int, nargs="+", default=[50, 100, 200, 400])
    args = ap.parse_args(argv)
    print(f"{'T':>5s} {'min|grad h_hat|^2':>18s} {'min|grad f|^2':>14s}   (medians over seeds)")
    for T in args.horizons:
        h = np.median([second_task(s, T, joint=True) for s in range(args.seeds)])
        f = np.median([second_task(s, T, joint=False) for s in range(args.seeds)])
        print(f"{T:5d} {h:18.6e} {f:14.6e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
