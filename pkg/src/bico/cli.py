"""Command-line entry points: run, report, sweep-p.

Exit codes: 0 on success, 2 on configuration errors, 3 on runtime
failures. The environment variable BICO_SEED overrides the config's
master seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

from .errors import ConfigError
from .experiment import load_config, report, run_experiment, write_report


def _apply_seed_override(cfg):
    env = os.environ.get("BICO_SEED")
    if env is None:
        return cfg
    try:
        seed = int(env)
    except ValueError as err:
        raise ConfigError(f"BICO_SEED must be an integer, got {env!r}") from err
    return dataclasses.replace(cfg, master_seed=seed)


def _cmd_run(args) -> int:
    cfg = _apply_seed_override(load_config(args.config))
    out = Path(args.out)
    results = run_experiment(cfg, out, workers=args.workers)
    print(f"{len(results)} replications complete in {out}")
    return 0


def _cmd_report(args) -> int:
    rep = report(args.in_dir)
    out = Path(args.out) if args.out else Path(args.in_dir)
    paths = write_report(rep, out, fmt=args.format)
    for g in rep.groups:
        ci = "n/a" if g.ci_oc is None else f"{g.ci_oc:.4g}"
        print(
            f"{g.label}: n={g.n_reps} mean_oc={g.mean_oc:.6g} ci_oc={ci} "
            f"mean_m={g.mean_m:.3g}"
        )
    print("wrote: " + ", ".join(str(p) for p in paths))
    return 0


def _cmd_sweep_p(args) -> int:
    cfg = _apply_seed_override(load_config(args.config))
    try:
        ps = [float(tok) for tok in args.p.split(",") if tok.strip() != ""]
    except ValueError as err:
        raise ConfigError(f"could not parse --p list: {err}") from err
    if not ps:
        raise ConfigError("--p list is empty")
    out = Path(args.out)
    for p in ps:
        sub_cfg = dataclasses.replace(cfg, algorithm="fixed_fraction", p=p)
        sub_dir = out / f"fixed_p{p:.2f}"
        run_experiment(sub_cfg, sub_dir, workers=args.workers)
        print(f"p={p:.2f} done -> {sub_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bico", description="budgeted simulation-vs-data collection experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--workers", type=int, default=1)
    p_run.add_argument("--out", default="results")
    p_run.set_defaults(func=_cmd_run)

    p_rep = sub.add_parser("report", help="aggregate replication results")
    p_rep.add_argument("--in", dest="in_dir", required=True)
    p_rep.add_argument("--format", choices=("csv", "json"), default="csv")
    p_rep.add_argument("--out", default=None)
    p_rep.set_defaults(func=_cmd_report)

    p_swp = sub.add_parser("sweep-p", help="run the fixed-fraction baseline over a list of p values")
    p_swp.add_argument("--config", required=True)
    p_swp.add_argument("--p", required=True, help="comma-separated fractions, e.g. 0,0.1,0.2")
    p_swp.add_argument("--workers", type=int, default=1)
    p_swp.add_argument("--out", default="results")
    p_swp.set_defaults(func=_cmd_sweep_p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - CLI boundary
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
