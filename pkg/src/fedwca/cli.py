"""Command line: ``fedwca run | inspect-checkpoint | dump-weights | default-config``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import config as config_mod
from .checkpoint import manifest
from .errors import FedWCAError
from .experiment import WIDE_WEIGHT_COLUMNS, consolidate_weights, run_grid, write_csv


def _cmd_run(args) -> int:
    cfg = config_mod.apply_env(config_mod.load(args.config))
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    outcome = run_grid(cfg, cfg.out_dir, jobs=args.jobs)
    for method, entry in outcome.summary["methods"].items():
        print(f"{method:15s} {100 * entry['mean']:6.2f} +- {100 * entry['std']:5.2f}")
    for f in outcome.failures:
        print(f"FAILED {f['method']} seed {f['seed']}: {f['error']}", file=sys.stderr)
    print(f"results in {outcome.out_dir}")
    return 0 if outcome.ok else 1


def _cmd_inspect(args) -> int:
    for info in manifest(args.file):
        shape = "x".join(str(d) for d in info.shape)
        print(f"{info.name}\t{shape}\t{info.sha256}")
    return 0


def _cmd_dump_weights(args) -> int:
    rows = consolidate_weights(args.dir)
    dest = Path(args.output) if args.output else Path(args.dir) / "weights_all.csv"
    write_csv(dest, WIDE_WEIGHT_COLUMNS, rows)
    print(f"{len(rows)} rows -> {dest}")
    return 0


def _cmd_default_config(args) -> int:
    text = config_mod.dumps(config_mod.ExperimentConfig())
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedwca", description="Federated source-free domain adaptation simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="log each finished run")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a (method x seed) grid from a config file")
    p.add_argument("config")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs (default 1)")
    p.add_argument("--out", default=None, help="output directory (overrides FEDWCA_OUT and the config)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("inspect-checkpoint", help="print tensor names, shapes and SHA-256 of a .fwca file")
    p.add_argument("file")
    p.set_defaults(func=_cmd_inspect)

    p = sub.add_parser("dump-weights", help="consolidate per-run weight files into one CSV")
    p.add_argument("dir")
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=_cmd_dump_weights)

    p = sub.add_parser("default-config", help="write the default experiment config")
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=_cmd_default_config)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.INFO if args.verbose or os.environ.get("FEDWCA_VERBOSE") else logging.WARNING
    logging.basicConfig(level=level, format="%(message)s")
    try:
        return args.func(args)
    except (FedWCAError, FileNotFoundError, ValueError) as exc:
        print(f"fedwca: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
