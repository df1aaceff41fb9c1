"""Command-line entry point: ``funnelmpc run | compare | compute-bound | list-models``."""

from __future__ import annotations

import argparse
import logging
import sys
from importlib import resources
from pathlib import Path
from typing import List, Optional

from .config import ConfigError, load
from .experiment import OUTPUT_ENV, compare, compute_bound, run_experiment
from .systems import MODELS

__all__ = ["main", "bundled_configs", "resolve_config"]


def bundled_configs() -> List[str]:
    """Names of the experiment configs shipped with the package."""
    root = resources.files("funnelmpc") / "configs"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".ini"))


def resolve_config(name: str) -> Path:
    """A path to an existing file, or the name of a bundled config (with or without ``.ini``)."""
    path = Path(name)
    if path.is_file():
        return path
    stem = name[:-4] if name.endswith(".ini") else name
    bundled = resources.files("funnelmpc") / "configs" / f"{stem}.ini"
    if bundled.is_file():
        return Path(str(bundled))
    raise FileNotFoundError(f"no config file or bundled config named '{name}' "
                            f"(bundled: {', '.join(bundled_configs())})")


def _cmd_run(args) -> int:
    cfg = load(resolve_config(args.config))
    result = run_experiment(cfg, args.out)
    print(result.summary.format())
    for f in result.files:
        print(f"wrote {f}")
    return 0 if result.summary.feasible else 1


def _cmd_compare(args) -> int:
    cfgs = [load(resolve_config(c)) for c in args.configs]
    summaries, table = compare(cfgs, args.out)
    print(table)
    return 0 if all(s.feasible for s in summaries) else 1


def _cmd_bound(args) -> int:
    cfg = load(resolve_config(args.config))
    bound, check = compute_bound(cfg)
    print(bound.format())
    row = bound.as_row()
    print(",".join(row))
    print(",".join(str(v) for v in row.values()))
    if check is not None:
        print(f"witness runs {check.n_runs}: max |u| = {check.max_input_norm:.6g}, "
              f"min margin = {check.min_margin:.6g}, within bound: {check.within(bound.m_value)}")
        return 0 if check.within(bound.m_value) else 1
    return 0


def _cmd_models(args) -> int:
    width = max(len(k) for k in MODELS)
    for name, desc in MODELS.items():
        print(f"{name:<{width}}  {desc}")
    print()
    print("bundled configs: " + ", ".join(bundled_configs()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="funnelmpc", description="Funnel MPC experiment runner.",
                                epilog=f"Set {OUTPUT_ENV} to redirect all output directories.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment; exit status 0 iff feasible")
    r.add_argument("config", help="config file or bundled config name")
    r.add_argument("--out", help="output directory")
    r.set_defaults(func=_cmd_run)
    c = sub.add_parser("compare", help="run experiments on a common basis and overlay them")
    c.add_argument("configs", nargs="+")
    c.add_argument("--out", help="output directory")
    c.set_defaults(func=_cmd_compare)
    b = sub.add_parser("compute-bound", help="input bound from the [feasibility] section")
    b.add_argument("config")
    b.set_defaults(func=_cmd_bound)
    m = sub.add_parser("list-models", help="list models and bundled configs")
    m.set_defaults(func=_cmd_models)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
