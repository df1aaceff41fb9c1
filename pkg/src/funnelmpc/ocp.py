"""Finite-horizon optimal control over piecewise-constant inputs.

The decision variable is one ``m``-vector per control interval, constrained
to the ball ``||u_k|| <= M``. The solver is a projected descent method with
Armijo backtracking and forward finite-difference gradients: a limited-memory
quasi-Newton step is tried first and the projected gradient with a
Barzilai-Borwein trial length is the fallback (``memory=0`` gives pure
projected gradient). Finite-difference perturbations and line-search trials are each
integrated as one batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .ode import ControlTrajectory, IntegratorConfig, TimeGrid
from .stagecost import BatchCost, CostConfig, CostValue, evaluate_costs

__all__ = [
    "OcpConfig",
    "OcpProblem",
    "OcpSolution",
    "HorizonInfeasible",
    "project_ball",
    "cost_gradient",
    "solve",
    "feasibility_restore",
    "shift_warm_start",
]

COST_KINDS = ("funnel", "quadratic_constrained")


class HorizonInfeasible(RuntimeError):
    """No finite-cost control was found for a horizon."""

    def __init__(self, message: str, diagnostics: str = ""):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class OcpConfig:
    max_iter: int = 200
    grad_tol: float = 1e-6
    step_tol: float = 1e-10
    fd_step: float = 1e-6
    armijo: float = 1e-4
    max_backtracks: int = 40
    trials_per_batch: int = 4
    restore_max_iter: int = 100
    restore_guard: float = 1e-3
    memory: int = 10

    def __post_init__(self):
        if self.max_iter < 0 or self.restore_max_iter < 0:
            raise ValueError("iteration caps must be nonnegative")
        if not (self.grad_tol > 0 and self.step_tol > 0 and self.fd_step > 0):
            raise ValueError("tolerances must be positive")
        if not 0 < self.armijo < 1:
            raise ValueError("armijo must lie in (0, 1)")
        if not 0 < self.restore_guard < 1:
            raise ValueError("restore_guard must lie in (0, 1)")
        if self.memory < 0:
            raise ValueError("memory must be nonnegative")
        if self.trials_per_batch < 1 or self.max_backtracks < 1:
            raise ValueError("line search needs at least one trial")


@dataclass(frozen=True)
class OcpProblem:
    """One horizon ``[t_hat, t_hat + horizon_T]`` starting from ``x_hat``."""

    sys: object
    t_hat: float
    x_hat: np.ndarray
    horizon_T: float
    control_grid: TimeGrid
    bound_m: float
    funnel: object
    yref: object
    cost_kind: str = "funnel"
    cost_cfg: CostConfig = CostConfig()
    int_cfg: IntegratorConfig = IntegratorConfig()
    output_constraint: bool = True

    def __post_init__(self):
        if self.cost_kind not in COST_KINDS:
            raise ValueError(f"cost_kind must be one of {COST_KINDS}")
        if not self.bound_m > 0:
            raise ValueError("bound_m must be positive")
        if not self.horizon_T > 0:
            raise ValueError("horizon_T must be positive")
        g = self.control_grid
        tol = 1e-9 * max(1.0, abs(self.t_hat) + self.horizon_T)
        if abs(g.t_start - self.t_hat) > tol or abs(g.t_end - self.t_hat - self.horizon_T) > tol:
            raise ValueError("control grid must span exactly [t_hat, t_hat + horizon_T]")
        x = np.asarray(self.x_hat, dtype=float)
        if x.shape != (self.sys.state_dim,):
            raise ValueError(f"x_hat must have shape ({self.sys.state_dim},)")
        object.__setattr__(self, "x_hat", x)

    @property
    def shape(self) -> tuple:
        return (self.control_grid.n_intervals, self.sys.input_dim)

    def costs(self, values, kind: Optional[str] = None) -> BatchCost:
        """Costs of a batch of input arrays of shape ``(B, N, m)``."""
        return evaluate_costs(self.sys, self.x_hat, values, self.control_grid, self.funnel,
                              self.yref, self.cost_cfg, self.int_cfg, kind=kind or self.cost_kind,
                              output_constraint=self.output_constraint)

    def cost(self, u: ControlTrajectory) -> CostValue:
        return self.costs(u.values[None]).item()

    def trajectory(self, values) -> ControlTrajectory:
        return ControlTrajectory(self.control_grid, values, self.bound_m)


@dataclass
class OcpSolution:
    u_star: ControlTrajectory
    cost: CostValue
    iterations: int
    converged: bool
    initial_cost: CostValue
    termination: str = ""
    diagnostics: str = field(default="", repr=False)
    restored: bool = False


def project_ball(values, bound: float) -> np.ndarray:
    """Clamp each row of ``values`` onto the Euclidean ball of radius ``bound``."""
    values = np.asarray(values, dtype=float)
    norms = np.linalg.norm(values, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norms > bound, bound / norms, 1.0)
    return values * scale


def cost_gradient(problem: OcpProblem, values, base: Optional[float] = None,
                  cfg: OcpConfig = OcpConfig(), kind: Optional[str] = None) -> np.ndarray:
    """Forward-difference gradient of the horizon cost at ``values`` (shape ``(N, m)``).

    Each coordinate is perturbed by ``fd_step * (1 + |u_j|)``. Where the
    forward point has infinite cost a backward difference is used; where both
    are infinite the component is set to zero.
    """
    values = np.asarray(values, dtype=float)
    if base is None:
        base = float(problem.costs(values[None], kind).value[0])
    flat = values.reshape(-1)
    d = flat.size
    steps = cfg.fd_step * (1.0 + np.abs(flat))
    forward = np.tile(flat, (d, 1)) + np.diag(steps)
    f_val = problem.costs(forward.reshape((d,) + values.shape), kind).value
    grad = (f_val - base) / steps
    bad = ~np.isfinite(f_val)
    if bad.any():
        idx = np.flatnonzero(bad)
        backward = np.tile(flat, (len(idx), 1))
        backward[np.arange(len(idx)), idx] -= steps[idx]
        b_val = problem.costs(backward.reshape((len(idx),) + values.shape), kind).value
        back = (base - b_val) / steps[idx]
        grad[idx] = np.where(np.isfinite(b_val), back, 0.0)
    return grad.reshape(values.shape)


@dataclass
class _DescentResult:
    values: np.ndarray
    cost: float
    iterations: int
    termination: str
    log: list


def _projected_gradient(u, g, M):
    """Gradient with the outward radial part removed on intervals at the bound."""
    r = g.copy()
    norms = np.linalg.norm(u, axis=-1)
    for k in np.flatnonzero(norms >= M * (1 - 1e-9)):
        n = u[k] / norms[k]
        radial = float(g[k] @ n)
        if radial < 0:
            r[k] -= radial * n
    return r


def _two_loop(g, pairs):
    """L-BFGS product ``H g`` from stored ``(s, y)`` pairs (oldest first)."""
    q = g.copy()
    coeffs = []
    for s, y in reversed(pairs):
        rho = 1.0 / float(y @ s)
        a = rho * float(s @ q)
        q -= a * y
        coeffs.append((rho, a))
    s, y = pairs[-1]
    q *= float(s @ y) / float(y @ y)
    for (s, y), (rho, a) in zip(pairs, reversed(coeffs)):
        q += (a - rho * float(y @ q)) * s
    return q


def _search_direction(u, g, pairs, M):
    """Quasi-Newton direction, with plain steepest descent on intervals pinned to the bound."""
    d = -_two_loop(g.ravel(), pairs).reshape(g.shape)
    norms = np.linalg.norm(u, axis=-1)
    pinned = (norms >= M * (1 - 1e-12)) & (np.einsum("ij,ij->i", g, u) < 0)
    d[pinned] = -g[pinned]
    if float(np.sum(d * g)) >= 0:
        return None
    return d


def _line_search(problem, u, J, g, d, alpha, cfg, kind):
    """Batched Armijo backtracking along ``P(u + a d)``; returns ``(a, u_new, J_new)`` or None."""
    M = problem.bound_m
    trial = alpha
    tried = 0
    while tried < cfg.max_backtracks:
        k = min(cfg.trials_per_batch, cfg.max_backtracks - tried)
        alphas = trial * 0.5 ** np.arange(k)
        cand = project_ball(u[None] + alphas[:, None, None] * d[None], M)
        decrease = np.einsum("bij,ij->b", cand - u[None], g)
        vals = problem.costs(cand, kind).value
        # an infinite trial cost fails this test and counts as a rejection
        ok = np.isfinite(vals) & (decrease < 0) & (vals <= J + cfg.armijo * decrease)
        if ok.any():
            j = int(np.argmin(np.where(ok, vals, np.inf)))
            return alphas[j], cand[j], float(vals[j])
        tried += k
        trial = alphas[-1] * 0.5
    return None


def _descend(problem: OcpProblem, values, cost: float, cfg: OcpConfig, kind: str,
             max_iter: int, stop=None) -> _DescentResult:
    """Projected descent from a finite-cost point.

    Each iteration tries the quasi-Newton scaled step (unit trial length),
    then falls back to the projected gradient with a spectral trial length.
    ``stop(values, cost)`` may end the iteration early (used by restoration).
    Accepted costs are nonincreasing.
    """
    M = problem.bound_m
    u = project_ball(values, M)
    J = cost
    log = []
    pairs: list = []
    prev_u = prev_g = None
    bb = None
    it = 0
    termination = "max_iter"
    for it in range(1, max_iter + 1):
        g = cost_gradient(problem, u, J, cfg, kind)
        pg_norm = float(np.linalg.norm(_projected_gradient(u, g, M)))
        if pg_norm <= cfg.grad_tol * max(1.0, abs(J)):
            termination = "gradient"
            it -= 1
            break
        if prev_u is not None:
            s, y = (u - prev_u).ravel(), (g - prev_g).ravel()
            sy = float(s @ y)
            if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
                pairs = (pairs + [(s, y)])[-cfg.memory:]
                bb = float(s @ s) / sy
        accepted = None
        if pairs and cfg.memory > 0:
            d = _search_direction(u, g, pairs, M)
            if d is not None:
                accepted = _line_search(problem, u, J, g, d, 1.0, cfg, kind)
        if accepted is None:
            pairs = []
            if bb is None or not np.isfinite(bb):
                bb = min(1.0, M / max(float(np.linalg.norm(g)), 1e-300))
            # bracket the spectral length from above, then halve
            accepted = _line_search(problem, u, J, g, -g, bb * 2.0 ** (cfg.trials_per_batch // 2),
                                    cfg, kind)
        if accepted is None:
            termination = "line_search"
            log.append(f"iter {it}: line search failed, |pg|={pg_norm:.3e}")
            break
        _, u_new, J_new = accepted
        step = float(np.linalg.norm(u_new - u))
        prev_u, prev_g = u, g
        u, J = u_new, J_new
        if stop is not None and stop(u, J):
            termination = "stop"
            break
        if step <= cfg.step_tol * (1.0 + float(np.linalg.norm(u))):
            termination = "step"
            break
    log.append(f"descent ({kind}): {termination} after {it} iterations, cost {J:.10g}")
    return _DescentResult(u, J, it, termination, log)


def feasibility_restore(problem: OcpProblem, u_init: ControlTrajectory,
                        cfg: OcpConfig = OcpConfig()) -> ControlTrajectory:
    """Find a finite-cost control starting from ``u_init``.

    A finite-cost ``u_init`` is returned unchanged. Otherwise the relaxed
    funnel cost is descended until the funnel cost becomes finite. The
    relaxed barrier is ``1/den`` continued linearly below
    ``cfg.restore_guard``; a guard much larger than ``epsilon_guard`` keeps
    its slope, and thus the finite-difference gradient, well scaled. The
    input penalty is dropped during restoration.

    Raises
    ------
    HorizonInfeasible
        If no finite-cost control is reached within ``restore_max_iter``.
    """
    if problem.cost(u_init).finite:
        return u_init
    if problem.cost_kind != "funnel":
        raise HorizonInfeasible("state escapes under the initial control; nothing to restore")
    u0 = project_ball(u_init.values, problem.bound_m)
    # without the input penalty the relaxed minimizer lies inside the funnel whenever any control does
    soft = replace(problem, cost_cfg=replace(problem.cost_cfg, epsilon_guard=cfg.restore_guard,
                                              lambda_u=0.0))
    relaxed = float(soft.costs(u0[None], "relaxed").value[0])
    if not np.isfinite(relaxed):
        raise HorizonInfeasible("relaxed cost is infinite at the initial control (state escape)")
    found = {}

    def stop(values, _):
        c = problem.costs(values[None]).item()
        if c.finite:
            found["values"] = values
            return True
        return False

    res = _descend(soft, u0, relaxed, cfg, "relaxed", cfg.restore_max_iter, stop)
    if "values" not in found:
        raise HorizonInfeasible(
            f"no finite-cost control after {res.iterations} restoration iterations",
            "\n".join(res.log))
    return problem.trajectory(found["values"])


def solve(problem: OcpProblem, warm_start: Optional[ControlTrajectory] = None,
          cfg: OcpConfig = OcpConfig()) -> OcpSolution:
    """Minimize the horizon cost over ball-constrained step functions.

    Never returns a worse control than the (restored) warm start. If no
    finite-cost control is found the solution carries the warm start with an
    infinite cost, ``converged=False`` and termination ``"infeasible"``.
    """
    shape = problem.shape
    if warm_start is None:
        warm_start = problem.trajectory(np.zeros(shape))
    if warm_start.values.shape != shape:
        raise ValueError(f"warm start has shape {warm_start.values.shape}, expected {shape}")
    wg, pg = warm_start.grid, problem.control_grid
    tol = 1e-9 * max(1.0, abs(pg.t_end))
    if abs(wg.t_start - pg.t_start) > tol or abs(wg.t_end - pg.t_end) > tol:
        raise ValueError("warm start does not live on the problem's control grid")
    if warm_start.max_norm() > problem.bound_m * (1 + 1e-12) + 1e-12:
        raise ValueError("warm start violates the input bound")
    warm_start = problem.trajectory(project_ball(warm_start.values, problem.bound_m))
    initial = problem.cost(warm_start)
    log = [f"initial cost {initial.value:.10g}"]
    restored = False
    start = warm_start
    if not initial.finite:
        log.append(f"initial control infeasible ({initial.reason} at t={initial.first_violation_time})")
        try:
            start = feasibility_restore(problem, warm_start, cfg)
            restored = True
            log.append("feasibility restored")
        except HorizonInfeasible as exc:
            log.append(f"restoration failed: {exc}")
            if exc.diagnostics:
                log.append(exc.diagnostics)
            return OcpSolution(warm_start, initial, 0, False, initial, "infeasible",
                               "\n".join(log), False)
    start_cost = problem.cost(start).value
    res = _descend(problem, start.values, start_cost, cfg, problem.cost_kind, cfg.max_iter)
    log.extend(res.log)
    u_star = problem.trajectory(res.values)
    cost = problem.cost(u_star)
    return OcpSolution(u_star, cost, res.iterations, res.termination in ("gradient", "step"),
                       initial, res.termination, "\n".join(log), restored)


def shift_warm_start(prev: ControlTrajectory, delta: float, fill: str = "hold_last") -> ControlTrajectory:
    """Shift ``prev`` forward by ``delta`` and pad the tail.

    ``delta`` must be an integer multiple of the control step. The padding is
    the last value of ``prev`` (``hold_last``) or zero.
    """
    if fill not in ("hold_last", "zero"):
        raise ValueError("fill must be 'hold_last' or 'zero'")
    grid = prev.grid
    ratio = delta / grid.step
    k = int(round(ratio))
    if k < 0 or abs(ratio - k) > 1e-9 * max(1.0, ratio):
        raise ValueError(f"delta {delta} is not a nonnegative multiple of the control step {grid.step}")
    N = grid.n_intervals
    pad = prev.values[-1] if fill == "hold_last" else np.zeros(prev.input_dim)
    kept = prev.values[min(k, N):]
    values = np.vstack([kept, np.tile(pad, (N - len(kept), 1))])
    new_grid = TimeGrid(grid.t_start + k * grid.step, grid.t_end + k * grid.step, N)
    return ControlTrajectory(new_grid, values, prev.bound_m)
