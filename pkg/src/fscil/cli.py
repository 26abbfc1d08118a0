"""Command-line front end: ``fscil <verb> ...``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import torch
import yaml

from .errors import StageFailed
from .harness import (
    STAGES,
    emit_results_table,
    load_config,
    load_summaries,
    run_baseline,
    run_experiment,
    run_sweep,
)

EXIT_CONFIG = 2
# stage failures exit with 10 + stage index
STAGE_EXIT = {s: 10 + i for i, s in enumerate(STAGES + ("joint-cnn",))}


def _common(p: argparse.ArgumentParser, needs_out=True):
    p.add_argument("--config", help="config file or bundled preset name (synthetic, cifar100, ...)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. --set transfer.lambda2=1.0")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    if needs_out:
        p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--overwrite", action="store_true", help="replace an existing run directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fscil", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="verb", required=True)

    for verb, help_ in (
        ("run", "full pipeline: pretrain, transfer, eval"),
        ("pretrain", "train the base model only"),
        ("transfer", "run up to complementary learning (resumes a run directory)"),
        ("eval", "run up to incremental evaluation (resumes a run directory)"),
    ):
        p = sub.add_parser(verb, help=help_)
        _common(p)
        p.add_argument("--resume", action="store_true", help="continue an interrupted run")

    p = sub.add_parser("sweep", help="one run per value of a config field")
    _common(p)
    p.add_argument("--axis", required=True, help="dotted config key or alias (way, shot, lambda1, lambda2, ...)")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("baseline", help="joint-cnn upper bound or ncm baseline")
    p.add_argument("kind", choices=["joint-cnn", "ncm"])
    _common(p)

    p = sub.add_parser("table", help="collate run directories into one results table")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", required=True, help="output file")
    p.add_argument("--format", choices=["csv", "text"], default=None)
    p.add_argument("--method", default=None, help="only this method from each run")
    return parser


def _config(args):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    path = args.config
    run_cfg = Path(getattr(args, "out", "") or "") / "config.yaml"
    if path is None and run_cfg.exists():
        path = run_cfg
    return load_config(path, overrides)


def _apply_substrate_env():
    threads = os.environ.get("FSCIL_NUM_THREADS")
    if threads:
        torch.set_num_threads(int(threads))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    _apply_substrate_env()
    try:
        if args.verb == "table":
            rows = []
            for run in args.runs:
                for name, s in load_summaries(run).items():
                    if args.method is None or name == args.method:
                        rows.append((f"{Path(run).name}:{name}", s))
            fmt = args.format or ("csv" if args.out.endswith(".csv") else "text")
            emit_results_table(rows, args.out, fmt)
            print(Path(args.out).read_text() if fmt == "text" else args.out)
            return 0
        cfg = _config(args)
    except (ValueError, KeyError, FileNotFoundError, yaml.YAMLError) as exc:
        print(f"fscil: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.verb in ("run", "pretrain", "transfer", "eval"):
            stop = {"run": None, "pretrain": "pretrain", "transfer": "transfer", "eval": "eval"}[args.verb]
            resume = args.resume or args.verb in ("transfer", "eval")
            manifest = run_experiment(cfg, args.out, overwrite=args.overwrite, resume=resume, stop_after=stop)
        elif args.verb == "sweep":
            values = [yaml.safe_load(v) for v in args.values.split(",")]
            run_sweep(cfg, args.axis, values, args.out, jobs=args.jobs, overwrite=args.overwrite)
            print((Path(args.out) / "sweep.txt").read_text())
            return 0
        else:
            manifest = run_baseline(cfg, args.kind, args.out, overwrite=args.overwrite)
    except StageFailed as exc:
        print(f"fscil: [stage={exc.stage}] {exc.cause}", file=sys.stderr)
        return STAGE_EXIT.get(exc.stage, 1)
    except (FileExistsError, ValueError) as exc:
        print(f"fscil: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    table = Path(manifest.run_dir) / "results.txt"
    if table.exists():
        print(table.read_text())
    else:
        print(f"stages done: {[s for s in manifest.stages if manifest.is_done(s)]} in {manifest.run_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
