"""``dbnlc <subcommand> --config <path> [--out DIR] [--seed N] [--workers N]``.

Exit codes: 0 success, 1 invalid config or input data, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .core import DataError
from .pipeline import STAGES, ConfigError, ExperimentConfig, StageError, run_pipeline, run_stage
from .structure import export_dot

__all__ = ["main", "run_pipeline", "export_dot"]

log = logging.getLogger("dbnlc")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dbnlc", description="Two-slice DBN affect modelling pipeline")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "run"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None, help="output directory (overrides the config)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
    return ap


def _is_validation(exc: BaseException) -> bool:
    return isinstance(exc, (ConfigError, DataError, FileNotFoundError))


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.seed is not None and not 0 <= args.seed < 2**64:
        log.error("seed must be an unsigned 64-bit integer")
        return 1
    try:
        cfg = ExperimentConfig.from_file(args.config, args.out, args.seed, args.workers)
    except ConfigError as e:
        log.error("%s", e)
        return 1
    try:
        if args.command == "run":
            manifest = run_pipeline(cfg)
            log.info("wrote %d artifacts to %s", len(manifest["artifacts"]), cfg.out_dir)
        else:
            for p in run_stage(cfg, args.command):
                log.info("wrote %s", p)
    except StageError as e:
        log.error("%s", e)
        return 1 if _is_validation(e.cause) else 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
