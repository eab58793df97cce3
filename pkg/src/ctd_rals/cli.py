"""``ctd-rals <experiment> --config <path>``: run an experiment, write CSV."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .experiments import EXPERIMENTS, ConfigError, parse_config, run_experiment, write_csv, write_trace
from .spde import ContractionError, DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


def _parser():
    p = argparse.ArgumentParser(prog="ctd-rals", description="CTD rank-reduction experiments.")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", type=Path, help="flat 'key = value' file")
    p.add_argument("--trials", type=int, help="trials per reducer (default 100, 1 for spde)")
    p.add_argument("--full", action="store_true", help="run 500 trials per reducer")
    p.add_argument("--seed", type=int, help="base seed; trial i uses seed + i")
    p.add_argument("--jobs", type=int, help="worker processes (default: CPU count)")
    p.add_argument("--trace", action="store_true", help="also write per-sweep trace files")
    p.add_argument("--timing", action="store_true", help="record wall time (output is then not reproducible)")
    p.add_argument("--out", type=Path, help="CSV path (default: stdout)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def _trace_path(out: Path | None, label: str, reducer: str) -> Path:
    stem = out.with_suffix("") if out else Path("ctd-rals")
    tag = label.replace("/", "_").replace("=", "")
    return stem.parent / f"{stem.name}.{tag}.{reducer}.trace.csv"


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        text = args.config.read_text() if args.config else ""
        cfg = parse_config(text, args.experiment)
        overrides = {}
        if args.full:
            overrides["trials"] = 500
        if args.trials is not None:
            overrides["trials"] = args.trials
        if args.seed is not None:
            overrides["seed"] = args.seed
        for key, value in overrides.items():
            if value < 0:
                raise ConfigError(f"--{key} must be non-negative")
            cfg.params[key] = value
        if args.jobs is not None and args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
    except (OSError, ConfigError) as exc:
        print(f"ctd-rals: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        records, traces = run_experiment(cfg, jobs=args.jobs, timing=args.timing, trace=args.trace)
    except (DivergenceError, ContractionError) as exc:
        print(f"ctd-rals: {exc}", file=sys.stderr)
        return EXIT_DIVERGED

    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_csv(records, fh)
    else:
        write_csv(records, sys.stdout)
    if args.trace:
        for (label, reducer), rows in traces.items():
            with open(_trace_path(args.out, label, reducer), "w", newline="") as fh:
                write_trace(rows, fh)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
