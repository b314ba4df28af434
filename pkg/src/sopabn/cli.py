"""Command line entry point: ``sopabn <command> --config PATH [options]``.

Seed and worker count resolve as flag, then environment variable
(``SOPABN_SEED``, ``SOPABN_THREADS``), then config file.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 output could not be written.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time

from .config import MAX_SEED, config_hash, load_config, to_dict, with_overrides
from .exceptions import ConfigError, SopabnError
from .experiments import COMMANDS
from .results import write_tables

log = logging.getLogger("sopabn")

EXIT_CONFIG, EXIT_NUMERIC, EXIT_OUTPUT = 2, 3, 4


def _u64(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if not 0 <= value <= MAX_SEED:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sopabn", description="Shapley-Owen interaction effects for PABN models")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "estimate": "run the configured algorithm once",
        "oracle": "exact posterior-averaged indices of a linear model",
        "ablation": "equal-allocation estimator MSE across K:M:N_O:N_I ratios",
        "compare": "matched-budget MSE of equal and sequential allocation",
        "dependence": "sequential allocation on the feedback model across pH dependence levels",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, metavar="PATH")
        p.add_argument("--seed", type=_u64, metavar="U64")
        p.add_argument("--out", default="out", metavar="DIR")
        p.add_argument("--format", default="both", choices=("csv", "json", "both"))
        p.add_argument("--threads", type=_positive, metavar="N")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _env_override(name: str, kind):
    raw = os.environ.get(name)
    if raw is None or raw == "":
        return None
    try:
        return kind(raw)
    except argparse.ArgumentTypeError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def resolve_config(args):
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else _env_override("SOPABN_SEED", _u64)
    threads = args.threads if args.threads is not None else _env_override("SOPABN_THREADS", _positive)
    return with_overrides(cfg, seed=seed, threads=threads)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    log.info("running %s with seed %d (config %s)", args.command, cfg.seed, config_hash(cfg))
    start = time.perf_counter()
    try:
        tables = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SopabnError, FloatingPointError, ArithmeticError) as exc:
        print(f"numerical error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    # wall time goes to the JSON mirror only so that CSV output stays byte-identical
    extra = {"wall_time_seconds": round(time.perf_counter() - start, 3), "config": to_dict(cfg)}
    try:
        paths = write_tables(tables, args.out, args.format, extra)
    except OSError as exc:
        print(f"cannot write output: {exc}", file=sys.stderr)
        return EXIT_OUTPUT
    for p in paths:
        log.info("wrote %s", p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
