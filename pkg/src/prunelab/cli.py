"""Command-line entry point: ``prunelab run|report|gradcheck|calibrate-corruptions``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import evaluation as E
from . import experiment as X
from .tensor import run_gradcheck


def _config_path(arg):
    p = Path(arg)
    if p.is_file():
        return p
    if not p.suffix:
        return X.recipe_path(arg)
    raise X.ConfigError(f"config file not found: {arg}")


def cmd_run(args):
    run_dir = X.run(_config_path(args.config), workers=args.workers, seed_override=args.seed_override)
    print(run_dir)
    return 0


def cmd_report(args):
    summary = X.report(args.dir)
    for vid, roles in summary["summary"].items():
        for role, stats in roles.items():
            print(f"{vid:12s} {role:10s} avg={stats['average']:.3f} min={stats['minimum']:.3f}")
    for vid, ex in summary["excess"].items():
        print(f"{vid:12s} excess slope={ex['slope']:+.4f} ci=[{ex['ci'][0]:+.4f}, {ex['ci'][1]:+.4f}]")
    return 0


def cmd_gradcheck(args):
    t0 = time.time()
    errors, ok = run_gradcheck(args.cases, args.seed, args.tol)
    for kind, errs in errors.items():
        print(f"{kind:14s} cases={len(errs):3d} max_rel_err={max(errs):.2e}")
    print(f"{'PASS' if ok else 'FAIL'} in {time.time() - t0:.2f}s")
    return 0 if ok else 1


def cmd_calibrate(args):
    cfg = X.ExperimentConfig.load(_config_path(args.config))
    rows = X.calibrate_corruptions(cfg, args.seeds)
    header = ("seed", "kind", "severity", "strength", "clean_accuracy", "accuracy", "drop")
    if args.out:
        E.write_csv(args.out, header, rows)
    else:
        print(",".join(header))
        for r in rows:
            print(",".join(E.fmt(v) for v in r))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="prunelab", description="Prune-retrain experiments on small numpy networks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config (path or bundled recipe name)")
    r.add_argument("config")
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--seed-override", type=int, default=None)
    r.set_defaults(func=cmd_run)

    r = sub.add_parser("report", help="consolidate the tables of a run directory")
    r.add_argument("dir")
    r.set_defaults(func=cmd_report)

    r = sub.add_parser("gradcheck", help="finite-difference check of every tensor op")
    r.add_argument("--cases", type=int, default=10, help="cases per op")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--tol", type=float, default=1e-4)
    r.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("calibrate-corruptions", help="accuracy drop of the unpruned net per kind and severity")
    r.add_argument("config")
    r.add_argument("--seeds", type=int, nargs="*", default=None)
    r.add_argument("--out", default=None, help="write CSV here instead of stdout")
    r.set_defaults(func=cmd_calibrate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run" and args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (X.ConfigError, X.ReportError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
