"""Receding-horizon loops: funnel MPC and classical MPC with an output constraint."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .funnelctrl import funnel_feedback
from .ocp import OcpConfig, OcpProblem, OcpSolution, project_ball, shift_warm_start, solve
from .ode import (ControlTrajectory, EscapeReport, IntegratorConfig, SimulationTrace, TimeGrid,
                  integrate_closed_loop, integrate_open_loop)
from .stagecost import CostConfig

__all__ = ["MpcConfig", "StepSummary", "MpcRunReport", "run", "applied_feedback_value",
           "funnel_controller_warm_start"]

log = logging.getLogger(__name__)

SCHEMES = ("fmpc", "classical")


def _multiple(a: float, b: float) -> Optional[int]:
    r = a / b
    k = int(round(r))
    return k if k >= 1 and abs(r - k) <= 1e-9 * max(1.0, r) else None


@dataclass(frozen=True)
class MpcConfig:
    """Receding-horizon settings.

    ``delta`` is the applied segment length, ``horizon_T`` the prediction
    horizon; both must be integer multiples of ``control_step``.
    """

    delta: float
    horizon_T: float
    sim_end: float
    control_step: float
    bound_m: float
    scheme: str = "fmpc"
    cost_cfg: CostConfig = CostConfig()
    int_cfg: IntegratorConfig = IntegratorConfig()
    ocp: OcpConfig = OcpConfig()
    warm_fill: str = "hold_last"

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if not (self.delta > 0 and self.control_step > 0):
            raise ValueError("delta and control_step must be positive")
        if self.horizon_T < self.delta:
            raise ValueError(f"horizon_T={self.horizon_T} must be at least delta={self.delta}")
        if _multiple(self.delta, self.control_step) is None:
            raise ValueError(f"delta={self.delta} is not a multiple of control_step={self.control_step}")
        if _multiple(self.horizon_T, self.control_step) is None:
            raise ValueError(f"horizon_T={self.horizon_T} is not a multiple of control_step={self.control_step}")
        if not self.bound_m > 0:
            raise ValueError("bound_m must be positive")

    @property
    def intervals_per_shift(self) -> int:
        return _multiple(self.delta, self.control_step)

    @property
    def cost_kind(self) -> str:
        return "funnel" if self.scheme == "fmpc" else "quadratic_constrained"


@dataclass
class StepSummary:
    step: int
    t_hat: float
    ocp_cost: float
    ocp_iterations: int
    converged: bool
    max_u_norm: float
    min_margin: float
    termination: str = ""
    wall_time: float = 0.0

    CSV_FIELDS = ("step", "t_hat", "ocp_cost", "ocp_iterations", "converged", "max_u_norm", "min_margin",
                  "termination")


@dataclass
class MpcRunReport:
    """Closed-loop outcome of :func:`run`.

    ``applied`` holds the control actually applied on each segment
    ``[t_hat, t_hat + delta)``.
    """

    trace: Optional[SimulationTrace]
    per_step: List[StepSummary]
    applied: List[ControlTrajectory]
    feasible_throughout: bool
    min_funnel_margin: float
    max_input_norm: float
    stop_reason: str = "completed"
    solutions: List[OcpSolution] = field(default_factory=list, repr=False)

    def write_steps_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(StepSummary.CSV_FIELDS)
            for s in self.per_step:
                w.writerow([s.step, repr(s.t_hat), repr(s.ocp_cost), s.ocp_iterations,
                            int(s.converged), repr(s.max_u_norm), repr(s.min_margin), s.termination])


def funnel_controller_warm_start(sys, funnel, yref, x_hat, grid: TimeGrid, bound_m: float,
                                 int_cfg: IntegratorConfig) -> np.ndarray:
    """Step-function approximation of the funnel controller over ``grid``.

    The funnel controller of the model's relative degree is simulated from
    ``x_hat``; each interval gets the average recorded input, clamped to the
    bound. Intervals after a controller singularity hold the last value.
    """
    fb = funnel_feedback(sys, funnel, yref)
    res = integrate_closed_loop(sys, x_hat, fb, grid, int_cfg)
    tr = res.trace if isinstance(res, EscapeReport) else res
    N, m, s = grid.n_intervals, sys.input_dim, int_cfg.substeps_per_interval
    values = np.zeros((N, m))
    if tr is None or len(tr) < 2:
        return values
    usable = (len(tr) - 1) // s
    for k in range(min(usable, N)):
        seg = tr.u[k * s:(k + 1) * s + 1]
        values[k] = 0.5 * (seg[:-1] + seg[1:]).mean(axis=0)
    if usable < N:
        values[usable:] = values[usable - 1] if usable > 0 else tr.u[0]
    return project_ball(values, bound_m)


def _first_warm_start(problem: OcpProblem, cfg: MpcConfig) -> ControlTrajectory:
    zero = np.zeros(problem.shape)
    if cfg.scheme != "fmpc":
        return problem.trajectory(zero)
    try:
        fc = funnel_controller_warm_start(problem.sys, problem.funnel, problem.yref, problem.x_hat,
                                          problem.control_grid, cfg.bound_m, cfg.int_cfg)
    except ValueError as exc:
        log.info("funnel controller warm start unavailable: %s", exc)
        return problem.trajectory(zero)
    vals = problem.costs(np.stack([fc, zero])).value
    # the funnel-controller candidate also seeds restoration when neither is finite
    best = 1 if vals[1] < vals[0] else 0
    return problem.trajectory((fc, zero)[best])


def run(sys, funnel, yref, x0, t0: float, cfg: MpcConfig) -> MpcRunReport:
    """Run the receding-horizon loop on ``[t0, sim_end]``.

    Each step solves the horizon problem from the measured state, applies
    the first ``delta`` of the solution and shifts. The loop halts when a
    funnel MPC horizon has no finite-cost control, when the state escapes,
    or, for classical MPC, when the applied segment leaves the funnel.

    Raises
    ------
    ValueError
        If ``x0`` is not strictly inside the funnel at ``t0`` or
        ``sim_end - t0`` is not a multiple of ``delta``.
    """
    x0 = np.asarray(x0, dtype=float)
    e0 = np.atleast_1d(sys.h(x0)) - np.atleast_1d(yref.value(t0))
    ratio0 = float(funnel.phi(t0)) * float(np.linalg.norm(e0))
    if not ratio0 < 1.0:
        raise ValueError(f"initial state outside the funnel: phi(t0)*|e(t0)| = {ratio0:.6g} >= 1")
    n_steps = _multiple(cfg.sim_end - t0, cfg.delta)
    if n_steps is None:
        raise ValueError(f"sim_end - t0 = {cfg.sim_end - t0} is not a multiple of delta = {cfg.delta}")
    k_apply = cfg.intervals_per_shift
    n_ctrl = _multiple(cfg.horizon_T, cfg.control_step)

    segments: List[SimulationTrace] = []
    steps: List[StepSummary] = []
    applied: List[ControlTrajectory] = []
    solutions: List[OcpSolution] = []
    feasible = True
    stop_reason = "completed"
    x_hat = x0
    warm = None
    for i in range(n_steps):
        t_hat = t0 + i * cfg.delta
        grid = TimeGrid(t_hat, t_hat + cfg.horizon_T, n_ctrl)
        problem = OcpProblem(sys, t_hat, x_hat, cfg.horizon_T, grid, cfg.bound_m, funnel, yref,
                             cfg.cost_kind, cfg.cost_cfg, cfg.int_cfg)
        if warm is None:
            warm = _first_warm_start(problem, cfg)
        clock = time.perf_counter()
        sol = solve(problem, warm, cfg.ocp)
        wall = time.perf_counter() - clock
        solutions.append(sol)
        summary = StepSummary(i, t_hat, sol.cost.value, sol.iterations, sol.converged,
                              float(np.linalg.norm(sol.u_star.values[:k_apply], axis=1).max()),
                              float("nan"), sol.termination, wall)
        steps.append(summary)
        if not sol.cost.finite:
            feasible, stop_reason = False, f"no finite-cost control at t={t_hat:.6g}"
            log.warning("step %d: %s\n%s", i, stop_reason, sol.diagnostics)
            break
        seg_grid = TimeGrid(t_hat, t_hat + cfg.delta, k_apply)
        u_seg = ControlTrajectory(seg_grid, sol.u_star.values[:k_apply], cfg.bound_m)
        applied.append(u_seg)
        res = integrate_open_loop(sys, x_hat, u_seg, cfg.int_cfg)
        if isinstance(res, EscapeReport):
            feasible, stop_reason = False, f"state escape ({res.reason}) at t={res.time:.6g}"
            if res.trace is not None:
                segments.append(res.trace.annotate(yref, funnel))
            break
        seg = res.annotate(yref, funnel)
        segments.append(seg)
        summary.min_margin = float(seg.margins().min())
        log.debug("step %d t=%.4g cost=%.6g iters=%d margin=%.4g", i, t_hat, sol.cost.value,
                  sol.iterations, summary.min_margin)
        if not np.all(seg.funnel_ratio() < 1.0):
            feasible, stop_reason = False, f"funnel violated on [{t_hat:.6g}, {t_hat + cfg.delta:.6g}]"
            break
        x_hat = seg.x[-1]
        warm = shift_warm_start(sol.u_star, cfg.delta, cfg.warm_fill)

    trace = SimulationTrace.concatenate(segments).annotate(yref, funnel) if segments else None
    margin = float(trace.margins().min()) if trace is not None else float("nan")
    u_max = max((u.max_norm() for u in applied), default=0.0)
    return MpcRunReport(trace, steps, applied, feasible, margin, u_max, stop_reason, solutions)


def applied_feedback_value(report: MpcRunReport, t: float) -> np.ndarray:
    """Input applied at time ``t``; segment ``[t_hat, t_hat + delta)`` owns its left end."""
    if not report.applied:
        raise ValueError("report has no applied segments")
    first, last = report.applied[0].grid, report.applied[-1].grid
    tol = 1e-12 * max(1.0, abs(t))
    if t < first.t_start - tol or t > last.t_end + tol:
        raise ValueError(f"t={t} outside the applied span [{first.t_start}, {last.t_end}]")
    starts = np.array([u.grid.t_start for u in report.applied])
    i = int(np.searchsorted(starts, t + tol, side="right")) - 1
    i = min(max(i, 0), len(report.applied) - 1)
    return report.applied[i](t)
