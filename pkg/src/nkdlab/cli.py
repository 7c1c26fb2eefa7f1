"""Command-line entry point: ``nkdlab <command> [--config FILE] [--key value ...]``."""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields

import numpy as np

from . import experiments as X
from .numerics import NKDError
from .training import NumericalError
from .verify import run_all

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

COMMANDS = {
    "verify": "check loss identities, normalisation and gradients",
    "train-teacher": "train the teacher and cache its logits",
    "train-baseline": "train the student with plain (or label-smoothed) CE",
    "distill": "distil the student from a cached teacher (modes: " + ", ".join(X.MODES) + ")",
    "tfnkd": "teacher-free training with smoothed-weight soft targets",
    "sweep-temp": "distil once per temperature in `lambdas`",
}


def build_parser():
    parser = argparse.ArgumentParser(prog="nkdlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value config file")
        for f in fields(X.ExperimentConfig):
            p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, metavar="VALUE",
                           default=None, help=f"(default: {_show(f.default)})")
    return parser


def _show(v):
    return ",".join(map(str, v)) if isinstance(v, tuple) else v


def cmd_verify(cfg, out=None):
    checks = run_all(cfg.trials, cfg.grad_instances, seed=cfg.seeds[0], inject_bug=cfg.inject_bug)
    failed = [c for c in checks if not c.passed]
    for c in checks:
        print(c.line(), file=out)
    for c in failed:
        print(json.dumps({"failed": c.name, "residual": c.max_residual, "case": c.worst_case}), file=out)
    print("verify: " + ("all checks passed" if not failed else f"{len(failed)} check(s) failed"), file=out)
    return EXIT_OK if not failed else EXIT_VERIFY


def _print_rows(rows, out=None):
    for r in X.summary_rows(rows).values():
        print(f"{r['experiment']:<36} top1 {r['top1']:.4f} ± {r['top1_std']:.4f}  "
              f"topk {r['topk']:.4f}  (n={r['n']})", file=out)


def run_command(command, cfg, out=None):
    if command == "verify":
        return cmd_verify(cfg, out)
    os.makedirs(cfg.output_dir, exist_ok=True)
    if command == "train-teacher":
        res, cache = X.train_teacher(cfg)
        print(f"teacher test top1 {res.final().top1:.4f}, checkpoint {cfg.teacher_path()}, "
              f"digest {cache.digest[:12]}", file=out)
    elif command == "train-baseline":
        _print_rows(X.run_train_baseline(cfg), out)
    elif command == "distill":
        _print_rows(X.run_distill(cfg), out)
    elif command == "tfnkd":
        _print_rows(X.run_tfnkd(cfg), out)
    elif command == "sweep-temp":
        rows, best = X.run_sweep_temperature(cfg)
        _print_rows(rows, out)
        print(f"best temperature: {best['experiment']} (top1 {best['top1']:.4f})", file=out)
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    overrides = {f.name: getattr(args, f.name) for f in fields(X.ExperimentConfig)
                 if getattr(args, f.name) is not None}
    try:
        cfg = X.build_config(args.config, overrides)
    except (X.ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return run_command(args.command, cfg)
    except NumericalError as e:
        path = os.path.join(cfg.output_dir, "numeric_failure.npz")
        os.makedirs(cfg.output_dir, exist_ok=True)
        np.savez(path, **{k: np.asarray(v) for k, v in e.dump.items()})
        print(f"numeric failure: {e}; offending batch written to {path}", file=sys.stderr)
        return EXIT_NUMERIC
    except X.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NKDError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
