"""Stage costs and horizon cost functionals.

The funnel stage cost ``1/(1 - phi^2 ||e||^2) - 1 + lambda_u ||u||^2`` is
infinite on the funnel boundary. On a discrete grid any node with
``1 - phi^2 ||e||^2 < epsilon_guard`` (which includes every node outside
the funnel) makes the horizon cost infinite, as does a finite escape of
the state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .ode import ControlTrajectory, IntegratorConfig, TimeGrid, integrate_batch

__all__ = [
    "CostValue",
    "CostConfig",
    "BatchCost",
    "quadratic_stage",
    "funnel_stage",
    "horizon_cost",
    "horizon_cost_constrained",
    "evaluate_costs",
]

QUADRATURES = ("trapezoid", "rectangle")
KINDS = ("funnel", "quadratic_constrained", "relaxed")


@dataclass(frozen=True)
class CostValue:
    """Extended nonnegative cost; ``boundary_hit`` marks the infinite value."""

    value: float
    boundary_hit: bool = False
    first_violation_time: Optional[float] = None
    reason: str = ""
    violation: float = 0.0
    max_violation: float = -math.inf

    def __post_init__(self):
        if self.boundary_hit != math.isinf(self.value):
            raise ValueError("boundary_hit must coincide with an infinite value")

    @property
    def finite(self) -> bool:
        return not self.boundary_hit

    @classmethod
    def infinite(cls, time: Optional[float] = None, reason: str = "boundary") -> "CostValue":
        return cls(math.inf, True, time, reason)

    def __float__(self) -> float:
        return self.value


@dataclass(frozen=True)
class CostConfig:
    lambda_u: float = 1.0
    quadrature: str = "trapezoid"
    epsilon_guard: float = 1e-9
    penalty_weight: float = 1e6

    def __post_init__(self):
        if self.lambda_u < 0:
            raise ValueError("lambda_u must be nonnegative")
        if self.quadrature not in QUADRATURES:
            raise ValueError(f"quadrature must be one of {QUADRATURES}")
        if not 0 < self.epsilon_guard < 1:
            raise ValueError("epsilon_guard must lie in (0, 1)")
        if self.penalty_weight < 0:
            raise ValueError("penalty_weight must be nonnegative")


def _error(sys, t, x, yref):
    return np.atleast_1d(sys.h(np.asarray(x, dtype=float))) - np.atleast_1d(yref.value(t))


def quadratic_stage(t, x, u, sys, yref, cfg: CostConfig) -> float:
    e = _error(sys, t, x, yref)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return float(e @ e + cfg.lambda_u * (u @ u))


def funnel_stage(t, x, u, sys, funnel, yref, cfg: CostConfig) -> CostValue:
    e = _error(sys, t, x, yref)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    den = 1.0 - float(funnel.phi(t)) ** 2 * float(e @ e)
    if den < cfg.epsilon_guard:
        return CostValue.infinite(t)
    return CostValue(1.0 / den - 1.0 + cfg.lambda_u * float(u @ u))


@dataclass
class BatchCost:
    """Costs of ``B`` input sequences from one initial state."""

    value: np.ndarray
    infinite: np.ndarray
    first_time: np.ndarray
    reason: list
    violation: np.ndarray
    max_violation: np.ndarray

    def item(self, b: int = 0) -> CostValue:
        if self.infinite[b]:
            t = None if np.isnan(self.first_time[b]) else float(self.first_time[b])
            return CostValue.infinite(t, self.reason[b])
        t = None if np.isnan(self.first_time[b]) else float(self.first_time[b])
        return CostValue(float(self.value[b]), False, t, "",
                         float(self.violation[b]), float(self.max_violation[b]))


def _integrate_nodes(c, h, quadrature):
    if quadrature == "trapezoid":
        return h * (0.5 * c[:, 0] + c[:, 1:-1].sum(axis=1) + 0.5 * c[:, -1])
    return h * c[:, :-1].sum(axis=1)


def _relaxed_barrier(den, eps):
    # 1/den above eps, continued linearly (C^1) below it
    safe = np.maximum(den, eps)
    return np.where(den >= eps, 1.0 / safe, 1.0 / eps - (den - eps) / eps ** 2)


def evaluate_costs(sys, x0, values, grid: TimeGrid, funnel, yref, cfg: CostConfig,
                   int_cfg: IntegratorConfig = IntegratorConfig(), kind: str = "funnel",
                   output_constraint: bool = True) -> BatchCost:
    """Horizon costs of a batch of step-function inputs ``values`` of shape ``(B, N, m)``.

    ``kind`` selects the funnel cost, the quadratic cost with a quadratic
    penalty on funnel violation, or the relaxed funnel cost (finite barrier,
    used for feasibility restoration).
    """
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    values = np.asarray(values, dtype=float)
    if values.ndim == 2:
        values = values[None]
    B = values.shape[0]
    x0 = np.asarray(x0, dtype=float)
    times, states, _, fail, reasons = integrate_batch(
        sys, np.broadcast_to(x0, (B, x0.shape[-1])), grid, int_cfg, values=values)
    h = times[1] - times[0]
    s = int_cfg.substeps_per_interval
    with np.errstate(all="ignore"):
        y = sys.h(states)
        r = np.asarray(yref.value(times)).reshape(len(times), -1)
        en2 = np.sum((y - r[None]) ** 2, axis=-1)
        u_part = cfg.lambda_u * h * s * np.sum(values ** 2, axis=(1, 2))
        escaped = fail >= 0
        # nodes after the last good node are frozen copies; ignore them
        node_idx = np.arange(len(times))[None, :]
        valid = ~escaped[:, None] | (node_idx <= fail[:, None])
        esc_time = np.where(escaped, times[np.minimum(fail + 1, len(times) - 1)], np.nan)

        violation = np.zeros(B)
        max_violation = np.full(B, -np.inf)
        first_time = np.full(B, np.nan)
        infinite = escaped.copy()
        reason = ["escape" if e else "" for e in escaped]

        if kind == "quadratic_constrained":
            excess = np.sqrt(en2) - np.asarray(funnel.psi(times))[None, :]
            excess = np.where(valid, excess, -np.inf)
            max_violation = excess.max(axis=1)
            viol_nodes = np.where(excess > 0, excess, 0.0) ** 2
            violation = _integrate_nodes(viol_nodes, h, cfg.quadrature)
            hit = excess > 0
            first = np.where(hit.any(axis=1), hit.argmax(axis=1), -1)
            first_time = np.where(first >= 0, times[np.maximum(first, 0)], np.nan)
            value = _integrate_nodes(np.where(valid, en2, 0.0), h, cfg.quadrature) + u_part
            if output_constraint:
                value = value + cfg.penalty_weight * violation
        else:
            phi2 = np.asarray(funnel.phi(times), dtype=float) ** 2
            den = 1.0 - phi2[None, :] * en2
            den = np.where(valid, den, 1.0)
            eps = cfg.epsilon_guard
            hit = den < eps
            any_hit = hit.any(axis=1)
            first = np.where(any_hit, hit.argmax(axis=1), -1)
            first_time = np.where(any_hit, times[np.maximum(first, 0)], np.nan)
            excess = np.sqrt(en2) - np.sqrt(1.0 / phi2)[None, :]
            max_violation = np.where(valid, excess, -np.inf).max(axis=1)
            if kind == "funnel":
                c = np.where(hit, 0.0, 1.0 / np.where(hit, 1.0, den) - 1.0)
                for b in np.flatnonzero(any_hit & ~escaped):
                    reason[b] = "boundary"
                infinite |= any_hit
            else:
                c = _relaxed_barrier(den, eps) - 1.0
            value = _integrate_nodes(c, h, cfg.quadrature) + u_part
        first_time = np.where(escaped & (np.isnan(first_time) | (esc_time < first_time)),
                              esc_time, first_time)
        value = np.where(infinite, np.inf, value)
    return BatchCost(value, infinite, first_time, reason, violation, max_violation)


def horizon_cost(sys, x0, u: ControlTrajectory, funnel, yref, cfg: CostConfig,
                 int_cfg: IntegratorConfig = IntegratorConfig()) -> CostValue:
    """Integral of the funnel stage cost along the response to ``u``."""
    return evaluate_costs(sys, x0, u.values[None], u.grid, funnel, yref, cfg, int_cfg).item()


def horizon_cost_constrained(sys, x0, u: ControlTrajectory, funnel, yref, cfg: CostConfig,
                             int_cfg: IntegratorConfig = IntegratorConfig(),
                             output_constraint: bool = True,
                             penalty_weight: Optional[float] = None) -> CostValue:
    """Quadratic tracking cost plus ``penalty_weight * int max(0, ||e|| - psi)^2``."""
    if penalty_weight is not None:
        cfg = CostConfig(cfg.lambda_u, cfg.quadrature, cfg.epsilon_guard, penalty_weight)
    return evaluate_costs(sys, x0, u.values[None], u.grid, funnel, yref, cfg, int_cfg,
                          kind="quadratic_constrained",
                          output_constraint=output_constraint).item()
