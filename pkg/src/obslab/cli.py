"""Command-line entry point: ``obslab <subcommand> --config FILE --out DIR``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure,
4 acceptance assertion failed (``report.assert_ordering = true``).
Failures also leave a machine-readable ``error.json`` in the output directory.
"""
import argparse
import json
import os
import sys
import traceback

SUBCOMMANDS = ("generate", "train-ho", "train-io", "mcmc", "evaluate", "report", "keys")
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_ACCEPTANCE = 0, 2, 3, 4
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")


def build_parser():
    p = argparse.ArgumentParser(prog="obslab", description="Learned and Monte Carlo observer experiments.")
    p.add_argument("command", choices=SUBCOMMANDS)
    p.add_argument("--config", help="flat 'section.key = value' configuration file")
    p.add_argument("--out", default="runs", help="output directory (default: runs)")
    p.add_argument("--seed", type=int, help="master seed; overrides rng.seed")
    p.add_argument("--threads", type=int, help="BLAS/numba threads (fallback: $OBSLAB_THREADS)")
    return p


def _set_threads(n):
    # must run before numpy is imported to take effect
    if n is None:
        env = os.environ.get("OBSLAB_THREADS")
        n = int(env) if env else None
    if n is not None:
        if n < 1:
            raise ValueError("--threads must be >= 1")
        for var in _THREAD_VARS:
            os.environ[var] = str(n)


def _error(out, code, exc):
    record = {"exit_code": code, "error": type(exc).__name__, "message": str(exc)}
    try:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "error.json"), "w") as fh:
            json.dump(record, fh, sort_keys=True, indent=1)
    except OSError:
        pass
    print(json.dumps(record), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        _set_threads(args.threads)
    except ValueError as exc:
        return _error(args.out, EXIT_CONFIG, exc)

    from . import pipeline
    from .config import ConfigError, describe, load_config, parse_config

    if args.command == "keys":
        print(describe())
        return EXIT_OK
    try:
        cfg = load_config(args.config) if args.config else parse_config("")
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
    except ConfigError as exc:
        return _error(args.out, EXIT_CONFIG, exc)
    try:
        if args.command == "report":
            pipeline.report(args.out, cfg["report.assert_ordering"])
            print(os.path.join(args.out, "report.md"))
            return EXIT_OK
        fn = {"generate": pipeline.generate, "train-ho": pipeline.train_ho,
              "train-io": pipeline.train_io, "mcmc": pipeline.mcmc,
              "evaluate": pipeline.evaluate}[args.command]
        result = fn(cfg, args.out)
        print(pipeline.run_dir(cfg, args.out) if isinstance(result, str) else json.dumps(result, sort_keys=True))
        return EXIT_OK
    except pipeline.AcceptanceFailure as exc:
        return _error(args.out, EXIT_ACCEPTANCE, exc)
    except ConfigError as exc:
        return _error(args.out, EXIT_CONFIG, exc)
    except Exception as exc:  # every other failure is a runtime error with a record
        if os.environ.get("OBSLAB_DEBUG"):
            traceback.print_exc()
        return _error(args.out, EXIT_RUNTIME, exc)


if __name__ == "__main__":
    sys.exit(main())
