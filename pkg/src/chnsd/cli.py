"""Command line entry point: ``chnsd <mode> --config <path> [--out <dir>]``.

Exit codes: 0 success, 1 configuration error, 2 solver failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def thread_cap(environ=os.environ) -> int | None:
    """Validated value of CHNSD_THREADS (None when unset)."""
    raw = environ.get("CHNSD_THREADS")
    if raw is None or raw.strip() == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"CHNSD_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"CHNSD_THREADS must be a positive integer, got {raw!r}")
    return n


def build_parser() -> argparse.ArgumentParser:
    from .io import MODES

    p = argparse.ArgumentParser(prog="chnsd", description=__doc__.splitlines()[0])
    p.add_argument("mode", choices=MODES)
    p.add_argument("--config", required=True, help="INI configuration file")
    p.add_argument("--out", default=None, help="output directory (overrides [output] directory)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        n = thread_cap()
    except ValueError as exc:
        print(f"chnsd: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if n is not None:
        # BLAS pools read these when first used, which has not happened yet
        for var in _THREAD_VARS:
            os.environ[var] = str(n)

    from .fem import SolverError
    from .io import ConfigError, load_config, run_experiment

    try:
        config = replace(load_config(args.config), mode=args.mode)
    except ConfigError as exc:
        print(f"chnsd: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = run_experiment(config, args.out)
    except ConfigError as exc:
        print(f"chnsd: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, ArithmeticError) as exc:
        print(f"chnsd: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    for name, path in result.artifacts.items():
        if isinstance(path, list):
            print(f"{name}: {len(path)} files in {path[0].parent}" if path else f"{name}: none")
        else:
            print(f"{name}: {path}")
    for key, value in result.summary.items():
        print(f"{key}:\n{value}" if key == "table" else f"{key}: {value}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
