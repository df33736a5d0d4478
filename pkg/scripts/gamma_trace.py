"""Per-round forgetting functional at base and adapted rates for one adaptive run.

Writes ``round gamma gamma_ad n_transfer n_interfere`` rows, whitespace separated.

    python scripts/gamma_trace.py --config configs/split_gaussians.json --out gamma.dat
"""
import argparse
import sys

from cflag.experiments import ExperimentConfig, run_experiment


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", required=True)
    ap.add_argument("--case", choices=["average", "worst"])
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", default="-")
    args = ap.parse_args(argv)

    cfg = ExperimentConfig.load(args.config)
    cfg.algorithm = "cflag-adaptive"
    if args.case:
        cfg.case = args.case
    if args.seed is not None:
        cfg.seed = args.seed
    trace = run_experiment(cfg).trace
    lines = [f"{r['round']} {r['gamma']!r} {r['gamma_ad']!r} {r['n_transfer']} {r['n_interfere']}"
             for r in trace]
    text = "\n".join(lines) + "\n"
    if args.out == "-":
        sys.stdout.write(text)
    else:
        with open(args.out, "w") as fh:
            fh.write(text)
    worse = sum(r["gamma_ad"] > r["gamma"] + 1e-12 for r in trace)
    print(f"{len(trace)} rounds, {worse} with gamma_ad > gamma", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
