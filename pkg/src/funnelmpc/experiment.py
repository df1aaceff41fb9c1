"""Run configured experiments and write traces, summaries and plots."""

from __future__ import annotations

import csv
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .config import ConfigError, ExperimentConfig, _is_multiple
from .feasibility import bound_general, bound_linear, check_witness
from .funnelctrl import funnel_feedback, sampled_hold
from .mpc import MpcRunReport, run as run_mpc
from .ode import (EscapeReport, IntegratorConfig, SimulationTrace, TimeGrid, integrate_closed_loop,
                  integrate_closed_loop_stiff)
from .svg import error_plot, input_plot
from .systems import byrnes_isidori_decompose

__all__ = ["RunSummary", "ExperimentResult", "output_dir", "run_experiment", "compare",
           "compute_bound", "OUTPUT_ENV"]

OUTPUT_ENV = "FMPC_OUTPUT_DIR"
IVP_METHODS = {"lsoda": "LSODA", "radau": "Radau", "bdf": "BDF"}


@dataclass
class RunSummary:
    """Outcome of one experiment. Everything except ``wall_time`` is reproducible."""

    name: str
    controller: str
    feasible: bool
    min_margin: float
    max_input_norm: float
    final_error_norm: float
    input_energy: float
    stop_reason: str
    config_hash: str
    wall_time: float = field(default=0.0, compare=False)

    def format(self) -> str:
        width = max(len(k) for k in asdict(self))
        return "\n".join(f"{k:<{width}}  {v:.10g}" if isinstance(v, float) else f"{k:<{width}}  {v}"
                         for k, v in asdict(self).items())


@dataclass
class ExperimentResult:
    summary: RunSummary
    trace: Optional[SimulationTrace]
    report: Optional[MpcRunReport] = None
    files: List[Path] = field(default_factory=list)


def output_dir(cfg: ExperimentConfig, override: Optional[str] = None) -> Path:
    """``override``, else ``$FMPC_OUTPUT_DIR/<name>``, else ``[output] directory``, else ``out/<name>``."""
    if override:
        return Path(override)
    env = os.environ.get(OUTPUT_ENV)
    if env:
        return Path(env) / cfg.name
    return Path(cfg.get("output", "directory", f"out/{cfg.name}"))


def _input_energy(trace: SimulationTrace) -> float:
    # the input is held on each substep, so a left Riemann sum is exact
    dt = np.diff(trace.t)
    return float(np.sum(np.sum(trace.u[:-1] ** 2, axis=1) * dt))


def _funnel_controller(cfg: ExperimentConfig, sys, fs, yr, x0, t0, sim_end):
    degree = cfg.get("controller", "degree", sys.relative_degree)
    fb = funnel_feedback(sys, fs, yr, degree)
    step = cfg.get("integrator", "step", 1e-3)
    blowup = cfg.get("integrator", "blowup_norm", 1e9)
    sample_dt = cfg.get("controller", "sample_dt")
    if sample_dt is not None:
        if not _is_multiple(sim_end - t0, sample_dt):
            raise ConfigError("controller", "sample_dt", "sim_end - t0 must be a multiple of sample_dt")
        grid = TimeGrid(t0, sim_end, int(round((sim_end - t0) / sample_dt)))
        subs = max(1, int(round(sample_dt / step)))
        return integrate_closed_loop(sys, x0, sampled_hold(fb, sample_dt, t0), grid,
                                     IntegratorConfig(subs, blowup))
    grid = TimeGrid(t0, sim_end, max(1, int(round((sim_end - t0) / step))))
    method = cfg.get("integrator", "method", "lsoda")
    if method == "rk4":
        return integrate_closed_loop(sys, x0, fb, grid, IntegratorConfig(1, blowup))
    return integrate_closed_loop_stiff(sys, x0, fb, grid, method=IVP_METHODS[method],
                                       rtol=cfg.get("integrator", "rtol", 1e-8),
                                       atol=cfg.get("integrator", "atol", 1e-10), blowup_norm=blowup)


def run_experiment(cfg: ExperimentConfig, out: Optional[str] = None, write: bool = True) -> ExperimentResult:
    """Run one configured experiment; write trace, step table, summary and plots when ``write``."""
    cfg.validate()
    sys, fs, yr, x0 = cfg.system(), cfg.funnel(), cfg.reference(), cfg.x0()
    t0 = cfg.get("horizon", "t0", 0.0)
    sim_end = cfg.require("horizon", "sim_end")
    clock = time.perf_counter()
    report = None
    if cfg.is_mpc:
        report = run_mpc(sys, fs, yr, x0, t0, cfg.mpc_config())
        trace, feasible, reason = report.trace, report.feasible_throughout, report.stop_reason
    else:
        res = _funnel_controller(cfg, sys, fs, yr, x0, t0, sim_end)
        if isinstance(res, EscapeReport):
            trace, feasible = res.trace, False
            reason = f"{res.reason} at t={res.time:.6g}"
        else:
            trace = res
            feasible = True
            reason = "completed"
        if trace is not None:
            trace.annotate(yr, fs)
            if feasible and not np.all(trace.funnel_ratio() < 1.0):
                feasible, reason = False, "funnel violated"
    wall = time.perf_counter() - clock
    if trace is not None and len(trace):
        margin = float(trace.margins().min())
        u_max = float(np.linalg.norm(trace.u, axis=1).max())
        final_e = float(trace.err_norm[-1])
        energy = _input_energy(trace)
    else:
        margin = u_max = final_e = energy = float("nan")
    summary = RunSummary(cfg.name, cfg.controller, bool(feasible), margin, u_max, final_e, energy,
                         reason, cfg.config_hash, wall)
    result = ExperimentResult(summary, trace, report)
    if write:
        d = output_dir(cfg, out)
        d.mkdir(parents=True, exist_ok=True)
        (d / "summary.txt").write_text(summary.format() + "\n")
        result.files.append(d / "summary.txt")
        if trace is not None and len(trace):
            trace.to_csv(d / "trace.csv")
            (d / "error.svg").write_text(error_plot([trace], [cfg.controller], f"{cfg.name}: error"))
            (d / "input.svg").write_text(input_plot([trace], [cfg.controller], f"{cfg.name}: input"))
            result.files += [d / "trace.csv", d / "error.svg", d / "input.svg"]
        if report is not None:
            report.write_steps_csv(d / "steps.csv")
            result.files.append(d / "steps.csv")
    return result


COMPARE_FIELDS = ("name", "controller", "feasible", "min_margin", "max_input_norm", "input_energy", "wall_time")


def _basis(cfg: ExperimentConfig) -> tuple:
    return (cfg.sections.get("model"), cfg.sections.get("funnel"), cfg.sections.get("reference"),
            cfg.get("horizon", "t0", 0.0), cfg.get("horizon", "sim_end"))


def compare(configs: Sequence[ExperimentConfig], out: Optional[str] = None):
    """Run several experiments on a common basis; returns ``(summaries, table text)``.

    Raises
    ------
    ConfigError
        If the configs differ in model, funnel, reference or time span.
    """
    if len(configs) < 2:
        raise ValueError("compare needs at least two configs")
    base = _basis(configs[0])
    for c in configs[1:]:
        if _basis(c) != base:
            raise ConfigError("compare", c.name, "model, funnel, reference and time span must match "
                              f"those of {configs[0].name}")
    results = [run_experiment(c, write=False) for c in configs]
    summaries = [r.summary for r in results]
    rows = [[str(getattr(s, f)) if not isinstance(getattr(s, f), float) else f"{getattr(s, f):.6g}"
             for f in COMPARE_FIELDS] for s in summaries]
    widths = [max(len(f), *(len(r[i]) for r in rows)) for i, f in enumerate(COMPARE_FIELDS)]
    table = "\n".join("  ".join(v.ljust(w) for v, w in zip(line, widths)).rstrip()
                      for line in [list(COMPARE_FIELDS)] + rows)
    d = Path(out) if out else (Path(os.environ.get(OUTPUT_ENV, "out")) / "compare")
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "compare.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COMPARE_FIELDS)
        for s in summaries:
            w.writerow([getattr(s, f) for f in COMPARE_FIELDS])
    (d / "table.txt").write_text(table + "\n")
    traces = [r.trace for r in results if r.trace is not None]
    labels = [r.summary.name for r in results if r.trace is not None]
    if traces:
        (d / "error.svg").write_text(error_plot(traces, labels, "tracking error"))
        (d / "input.svg").write_text(input_plot(traces, labels, "input"))
    return summaries, table


def compute_bound(cfg: ExperimentConfig):
    """Feasibility bound from the ``[feasibility]`` section; returns ``(bound, witness check or None)``."""
    sys, fs, yr = cfg.system(), cfg.funnel(), cfg.reference()
    method = cfg.get("feasibility", "method", "general")
    t0 = cfg.get("horizon", "t0", 0.0)
    if method == "linear":
        if not sys.is_linear:
            raise ConfigError("feasibility", "method", "linear bound needs a linear model")
        bif = byrnes_isidori_decompose(*sys.matrices)
        alpha, beta = cfg.get("feasibility", "alpha"), cfg.get("feasibility", "beta")
        ab = (alpha, beta) if alpha is not None and beta is not None else None
        radius = cfg.require("feasibility", "eta0_radius")
        try:
            bound = bound_linear(bif, fs, yr, radius, ab)
        except ValueError as exc:
            raise ConfigError("feasibility", "method", str(exc)) from None
        model = bif.model()
    elif method == "general":
        if sys.bif is None:
            raise ConfigError("feasibility", "method", f"model '{sys.label}' has no Byrnes-Isidori model")
        model = sys.bif
        bound = bound_general(model, fs, yr, cfg.require("feasibility", "box"),
                              cfg.get("feasibility", "n_samples", 10_000),
                              cfg.get("feasibility", "safety", 1.1))
        radius = None
    else:
        raise ConfigError("feasibility", "method", "must be 'general' or 'linear'")
    runs = cfg.get("feasibility", "check_runs", 0)
    if not runs:
        return bound, None
    rng = np.random.default_rng(0)
    m, k = model.output_dim, model.internal_dim
    states = []
    for _ in range(runs):
        e = rng.uniform(-1, 1, m)
        e *= 0.99 * rng.uniform() / max(np.linalg.norm(e), 1e-12) * float(fs.psi(t0))
        y = np.atleast_1d(yr.value(t0)) + e
        if radius is not None:
            eta = rng.normal(size=k)
            eta *= radius * rng.uniform() ** (1 / max(k, 1)) / max(np.linalg.norm(eta), 1e-12)
        else:
            box = np.asarray(cfg.require("feasibility", "box"))[m:]
            eta = rng.uniform(box[:, 0], box[:, 1])
        states.append(model.from_coords(y, eta))
    check = check_witness(sys, model, fs, yr, np.array(states), t0,
                          cfg.get("feasibility", "check_duration", 1.0))
    return bound, check
