"""Command-line driver.

    stochim <experiment> [--config FILE] [--out DIR] [--seeds 0,1,2] [--threads N] [--verbose]

Exit codes: 0 all thresholds pass, 1 a threshold fails, 2 configuration
error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..noise import GridError
from ..perron import ConvergenceError, GapError
from ..spectral import SpecError
from .config import EXPERIMENTS, ConfigError, parse_config
from .defaults import default_config
from .runners import run

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("stochim")


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be a comma-separated list of integers: {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stochim", description=__doc__.split("\n\n")[0])
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", type=Path, help="flat key = value configuration file")
    p.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
    p.add_argument("--seeds", type=_seeds, help="comma-separated seeds (overrides the config)")
    p.add_argument("--threads", type=int, default=1, help="worker processes")
    p.add_argument("--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_PASS
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = default_config(args.experiment)
        if args.config is not None:
            text = args.config.read_text()
            over = parse_config(text, validate=False)
            keys = {ln.split("=", 1)[0].strip() for ln in text.splitlines()
                    if "=" in ln.split("#", 1)[0]}
            for k in keys:
                setattr(cfg, k, getattr(over, k))
            if over.experiment != args.experiment and "experiment" in keys:
                raise ConfigError(f"config is for {over.experiment!r}, not {args.experiment!r}")
            cfg.experiment = args.experiment
        if args.seeds is not None:
            cfg.seeds = args.seeds
        if args.out is not None:
            cfg.output_dir = str(args.out)
        if args.threads < 1:
            raise ConfigError("threads must be at least 1")
        cfg.validate()
    except (ConfigError, SpecError, OSError) as exc:
        errs = exc.errors if isinstance(exc, ConfigError) else [str(exc)]
        for e in errs:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    log.info("running %s with seeds %s", cfg.experiment, cfg.seeds)
    try:
        report = run(cfg, threads=args.threads)
    except (GapError, SpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConvergenceError, FloatingPointError, GridError, OverflowError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    dest = report.write(cfg.output_dir)
    for c in report.criteria:
        status = "PASS" if c["passed"] else "FAIL"
        print(f"[{status}] {c['id']}: {c['name']} = {c['value']} ({c['threshold']})")
    print(f"report: {dest}")
    return EXIT_PASS if report.passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
