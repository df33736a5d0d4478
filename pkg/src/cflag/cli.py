"""Command line entry point: ``cflag {run,gen-data,report,validate}``.

Failures exit nonzero and print a one-line JSON error object on stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .datagen import export_shards, write_csv
from .errors import ConfigurationError, ParseError
from .experiments import (ExperimentConfig, ReportError, default_out_dir, dump_json, prepare,
                          report, run_experiment, validate)

EXIT_ERROR = 2


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args)
    out = Path(args.out) if args.out else default_out_dir(cfg, args.config)
    art = run_experiment(cfg, out, threads=args.threads)
    print(json.dumps({"out": str(out), "avg_accuracy": art.summary["avg_accuracy"],
                      "forgetting": art.summary["forgetting"]}))
    return 0


def cmd_gen_data(args) -> int:
    cfg = _load(args)
    setup = prepare(cfg)
    out = Path(args.out)
    paths = export_shards(out, setup.train_shards)
    for s, test in enumerate(setup.test_sets):
        paths.append(write_csv(out / f"task{s}_test.csv", test))
    print(json.dumps({"out": str(out), "files": len(paths)}))
    return 0


def cmd_report(args) -> int:
    res = report(args.run_dir, args.out)
    print(json.dumps(res))
    return 0


def cmd_validate(args) -> int:
    cfg = _load(args)
    setup = validate(cfg)
    print(json.dumps({"valid": True, "L": setup.L, "num_tasks": len(setup.stream)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cflag", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (default: $CFLAG_OUTPUT_ROOT/<config>-seed<seed>)")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gen-data", help="write task shards and test splits as CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("report", help="recompute metrics and plot data from a run directory")
    p.add_argument("run_dir")
    p.add_argument("--out", help="where to write .dat files (default: run_dir)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("validate", help="check a config without running it")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_validate)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        print(dump_json({"error": "ConfigurationError", "message": "--threads must be >= 1"})
              .replace("\n", " "), file=sys.stderr)
        return EXIT_ERROR
    try:
        return args.func(args)
    except (ConfigurationError, ParseError, ReportError, FileNotFoundError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc),
                          "command": args.command}), file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:  # noqa: BLE001
        print(json.dumps({"error": type(exc).__name__, "message": str(exc),
                          "command": args.command}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
