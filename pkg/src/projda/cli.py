"""Command-line interface.

Subcommands: run, sweep, emit, validate. Exit codes: 0 success, 2 config
error, 3 divergence flagged in an otherwise successful run, 4 internal
error.
"""

import argparse
import sys

from . import harness

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_INTERNAL = 4


def _add_common(parser):
    parser.add_argument("config", help="path to a JSON experiment config")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config's base seed")
    parser.add_argument("--quick", action="store_true",
                        help="cap repetitions for a fast pass")
    parser.add_argument("--out", default="results",
                        help="output directory (default: results)")
    parser.add_argument("--jobs", type=int, default=1,
                        help="parallel worker processes")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="projda",
        description="Twin experiments for filters with subspace-projected data")
    sub = parser.add_subparsers(dest="command", required=True)

    _add_common(sub.add_parser("run", help="run the configured filters"))
    _add_common(sub.add_parser("sweep", help="sweep the (p, omega, alpha) grid"))

    emit = sub.add_parser("emit", help="emit figure data from sweep results")
    emit.add_argument("results_dir", help="directory holding sweep.csv")
    emit.add_argument("--figure", required=True, help="figure id, e.g. l96_tune_p")
    emit.add_argument("--out", default=None, help="output CSV path")

    validate = sub.add_parser("validate", help="validate a config file")
    validate.add_argument("config", help="path to a JSON experiment config")
    return parser


def _load(args):
    config = harness.load_config(args.config)
    if getattr(args, "seed", None) is not None:
        from dataclasses import replace
        config = replace(config, base_seed=args.seed)
    return config


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            harness.load_config(args.config)
            print(f"{args.config}: OK")
            return EXIT_OK
        if args.command == "emit":
            path = harness.emit_plot_data(args.results_dir, args.figure, args.out)
            print(f"wrote {path}")
            return EXIT_OK
        config = _load(args)
        if args.command == "run":
            results = harness.run_experiment(
                config, out_dir=args.out, quick=args.quick, jobs=args.jobs)
            diverged = harness.any_diverged(results)
            print(f"wrote {args.out}/summary.json"
                  + (" (divergence flagged)" if diverged else ""))
            return EXIT_DIVERGED if diverged else EXIT_OK
        if args.command == "sweep":
            rows = harness.run_sweep(
                config, out_dir=args.out, quick=args.quick, jobs=args.jobs)
            diverged = any(r.diverged_count > 0 for r in rows)
            for r in rows:
                if r.best:
                    print(f"best {r.filter_label}: p={r.p} omega={r.omega} "
                          f"alpha={r.alpha} mean_rmse={r.mean_rmse:.4f}")
            print(f"wrote {args.out}/sweep.csv")
            return EXIT_DIVERGED if diverged else EXIT_OK
        return EXIT_INTERNAL
    except (harness.ConfigError, harness.MissingCoverageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
