"""Command-line runner: ``run <config>``, ``list``, ``validate <config>``."""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import ConfigInvalid, load_config
from .experiments import EXPERIMENTS, OUT_ENV, ExperimentFailed, catalog, run_experiment

EXIT_CONFIG = 2
EXIT_FAILED = 3


def _error_line(kind: str, **fields) -> str:
    return json.dumps({"error": kind, **fields}, sort_keys=True)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfbelavkin", description="Run mean-field quantum filtering experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the experiment defined by a TOML config")
    run.add_argument("config")
    run.add_argument("--seed", type=int, help="override the config seed")
    run.add_argument("--out", help=f"output directory (default: config 'out', else ${OUT_ENV}/<experiment>_<seed>)")
    run.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker processes for independent jobs")
    sub.add_parser("list", help="list experiments and their config keys")
    val = sub.add_parser("validate", help="check a config without running it")
    val.add_argument("config")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list":
        print(catalog())
        return 0
    try:
        cfg = load_config(args.config, EXPERIMENTS)
        if args.command == "validate":
            print(f"ok {cfg.experiment} {cfg.config_hash()}")
            return 0
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigInvalid("seed", "must be non-negative")
            cfg.seed = args.seed
        result = run_experiment(cfg, args.out, max(1, args.threads))
    except ConfigInvalid as exc:
        print(_error_line("ConfigInvalid", field=exc.field, reason=exc.reason), file=sys.stderr)
        return EXIT_CONFIG
    except ExperimentFailed as exc:
        print(
            _error_line("ExperimentFailed", experiment=exc.experiment, seed=exc.seed, step=exc.step, reason=str(exc.cause)),
            file=sys.stderr,
        )
        return EXIT_FAILED
    print(f"wrote {result['out']}")
    return 0
