"""Average accuracy and forgetting of every algorithm over a range of seeds.

    python scripts/compare_algorithms.py --config configs/split_gaussians.json --seeds 10
"""
import argparse
import csv
import sys

import numpy as np

from cflag.experiments import ALGORITHMS, ExperimentConfig, run_experiment


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", required=True)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--csv", help="also write per-seed rows here")
    args = ap.parse_args(argv)

    base = ExperimentConfig.load(args.config)
    rows = []
    for alg in ALGORITHMS:
        for seed in range(args.seeds):
            cfg = ExperimentConfig.from_dict({**base.to_dict(), "algorithm": alg, "seed": seed,
                                              "diagnostics": False})
            s = run_experiment(cfg).summary
            rows.append({"algorithm": alg, "seed": seed, "avg_accuracy": s["avg_accuracy"],
                         "forgetting": s["forgetting"]})
    print(f"{'algorithm':16s} {'avg acc':>9s} {'forgetting':>11s}")
    for alg in ALGORITHMS:
        acc = np.mean([r["avg_accuracy"] for r in rows if r["algorithm"] == alg])
        fgt = np.mean([r["forgetting"] for r in rows if r["algorithm"] == alg])
        print(f"{alg:16s} {acc:9.4f} {fgt:11.4f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
