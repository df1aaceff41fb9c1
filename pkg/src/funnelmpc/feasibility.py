"""Input bounds that guarantee a control keeping the error inside the funnel.

For a system in Byrnes-Isidori form ``y' = p(y, eta) + Gamma(y, eta) u``,
the feedback ``u = Gamma^{-1}(-p + phi(t0) e(t0) psi' + yref')`` keeps
``e(t) = phi(t0) e(t0) psi(t)`` strictly inside the funnel. Its size is at
most ``G_max (P_max + sup|psi'| + sup|yref'|)``, where the maxima run over a
set containing every reachable ``(y, eta)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import expm
from scipy.stats import qmc

from .funnel import constant_funnel
from .ode import EscapeReport, IntegratorConfig, TimeGrid, integrate_closed_loop
from .systems import BifModel, ByrnesIsidoriData, DynamicalSystem, ModelError

__all__ = [
    "FeasibilityBound",
    "bound_general",
    "bound_linear",
    "decay_estimate",
    "witness_feedback",
    "WitnessCheck",
    "check_witness",
    "Counterexample",
    "counterexample_eta0",
]


@dataclass(frozen=True)
class FeasibilityBound:
    """Input bound ``m_value >= g_max (p_max + psi_dot_sup + yref_dot_sup)``."""

    m_value: float
    p_max: float
    g_max: float
    psi_dot_sup: float
    yref_dot_sup: float
    compact_set_descriptor: dict = field(default_factory=dict)

    FIELDS = ("m_value", "p_max", "g_max", "psi_dot_sup", "yref_dot_sup")

    def __post_init__(self):
        vals = [getattr(self, f) for f in self.FIELDS]
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise ValueError(f"bound components must be finite and nonnegative: {vals}")
        floor = self.g_max * (self.p_max + self.psi_dot_sup + self.yref_dot_sup)
        if self.m_value < floor * (1 - 1e-12):
            raise ValueError(f"m_value {self.m_value} is below g_max*(...) = {floor}")

    def as_row(self) -> dict:
        row = {f: getattr(self, f) for f in self.FIELDS}
        row["set"] = self.compact_set_descriptor.get("kind", "")
        return row

    def format(self) -> str:
        width = max(len(f) for f in self.FIELDS)
        lines = [f"{f:<{width}}  {getattr(self, f):.10g}" for f in self.FIELDS]
        for k, v in self.compact_set_descriptor.items():
            lines.append(f"{k:<{width}}  {v}")
        return "\n".join(lines)


def _as_model(bif) -> BifModel:
    if isinstance(bif, BifModel):
        return bif
    if isinstance(bif, DynamicalSystem):
        if bif.bif is None:
            raise ModelError(f"system '{bif.label}' has no Byrnes-Isidori model")
        return bif.bif
    if isinstance(bif, ByrnesIsidoriData):
        return bif.model()
    raise TypeError(f"cannot read a Byrnes-Isidori model from {type(bif).__name__}")


def _box_samples(lo, hi, n_samples: int) -> np.ndarray:
    d = len(lo)
    pts = qmc.Halton(d, scramble=False).random(n_samples)
    if d <= 12:
        pts = np.vstack([pts, np.array(list(product((0.0, 1.0), repeat=d)))])
    return lo + pts * (hi - lo)


def bound_general(bif, funnel, yref, box: Sequence, n_samples: int = 10_000,
                  safety: float = 1.1) -> FeasibilityBound:
    """Bound from maxima of ``||p||`` and ``||Gamma^{-1}||`` over a box in ``(y, eta)``.

    The maxima are estimated on an unscrambled Halton sequence plus the box
    corners, then ``m_value`` is multiplied by ``safety``. Corners make the
    estimate exact (and monotone in the box) when ``||p||`` is convex and
    ``Gamma`` constant, as for linear systems.

    Parameters
    ----------
    bif : BifModel, DynamicalSystem with a ``bif`` model, or ByrnesIsidoriData
    box : sequence of ``(lo, hi)`` pairs, outputs first, then internal states
    """
    model = _as_model(bif)
    box = np.asarray(box, dtype=float)
    d = model.output_dim + model.internal_dim
    if box.shape != (d, 2):
        raise ValueError(f"box must have {d} (lo, hi) rows, got shape {box.shape}")
    lo, hi = box[:, 0], box[:, 1]
    if not (np.all(np.isfinite(box)) and np.all(hi > lo)):
        raise ValueError("box must be finite with hi > lo in every coordinate")
    if n_samples < 1 or safety < 1:
        raise ValueError("need n_samples >= 1 and safety >= 1")
    pts = _box_samples(lo, hi, n_samples)
    m = model.output_dim
    y, eta = pts[:, :m], pts[:, m:]
    # non-finite values are reported below with the offending point
    with np.errstate(all="ignore"):
        p = np.asarray(model.p(y, eta), dtype=float).reshape(len(pts), m)
        G = np.asarray(model.gamma(y, eta), dtype=float).reshape(len(pts), m, m)
    if not np.all(np.isfinite(p)):
        i = int(np.flatnonzero(~np.all(np.isfinite(p), axis=1))[0])
        raise ModelError(f"p is not finite at (y, eta) = {pts[i].tolist()}")
    sv = np.linalg.svd(G, compute_uv=False)
    singular = sv[:, -1] <= 1e-12 * np.maximum(sv[:, 0], 1.0)
    if singular.any():
        i = int(np.flatnonzero(singular)[0])
        raise ModelError(f"Gamma is singular at (y, eta) = {pts[i].tolist()}")
    p_max = float(np.linalg.norm(p, axis=1).max())
    g_max = float((1.0 / sv[:, -1]).max())
    psi_dot, yref_dot = float(funnel.psi_dot_sup), float(yref.dot_sup)
    descriptor = {"kind": "box", "bounds": box.tolist(), "n_samples": n_samples,
                  "n_points": len(pts), "safety": safety}
    return FeasibilityBound(safety * g_max * (p_max + psi_dot + yref_dot), p_max, g_max,
                            psi_dot, yref_dot, descriptor)


def _weighted_norm_sup(a4: np.ndarray, alpha: float, rel_tol: float = 1e-3,
                       max_points: int = 200_000) -> tuple:
    """Lower and upper bounds on ``sup_t ||exp(a4 t)|| exp(alpha t)``.

    Once the weighted norm is at most 1 at some ``T1``, the semigroup
    property bounds every later time by a time in ``[0, T1]``. Between grid
    points the weighted norm grows by at most ``exp((mu + alpha) h)``, where
    ``mu`` is the logarithmic 2-norm of ``a4``, which gives the upper bound.
    """
    rate = -float(np.max(np.linalg.eigvals(a4).real))

    def weighted(t):
        return float(np.linalg.norm(expm(a4 * t), 2)) * np.exp(alpha * t)

    t1 = 1.0 / (rate - alpha) if alpha < rate else 1.0 / rate
    while weighted(t1) > 1.0 + 1e-12:
        t1 *= 2.0
        if alpha * t1 > 700.0:
            raise ValueError("weighted norm of exp(A4 t) does not decay below 1")
    slope = max(float(np.linalg.eigvalsh(0.5 * (a4 + a4.T)).max()) + alpha, 0.0)
    n = int(np.clip(np.ceil(t1 * slope / np.log1p(rel_tol)) + 1, 1001, max_points))
    h = t1 / (n - 1)
    # exp(a4 (j b + i) h) = exp(a4 j b h) exp(a4 i h): two small batches instead of n large arguments
    b = int(np.ceil(np.sqrt(n)))
    coarse = expm(np.arange(b + 1)[:, None, None] * (b * h) * a4[None])
    fine = expm(np.arange(b)[:, None, None] * h * a4[None])
    E = np.einsum("jkl,ilm->jikm", coarse, fine).reshape(-1, *a4.shape)
    ts = np.arange(len(E)) * h
    vals = np.linalg.norm(E, 2, axis=(1, 2)) * np.exp(alpha * ts)
    lower = float(vals[ts <= t1 * (1 + 1e-12)].max())
    return lower, lower * float(np.exp(slope * h))


def _hurwitz_rate(a4: np.ndarray) -> float:
    rate = -float(np.max(np.linalg.eigvals(a4).real))
    if not rate > 0:
        raise ValueError("A4 is not Hurwitz: internal dynamics are not exponentially stable")
    return rate


def decay_estimate(a4, alpha: Optional[float] = None) -> tuple:
    """``(alpha, beta)`` with ``||exp(a4 t)|| <= beta exp(-alpha t)`` for all ``t >= 0``.

    ``alpha`` defaults to 0.9 times the decay rate of the slowest mode.
    ``beta`` is a guaranteed upper bound on the supremum (within a relative
    1e-3 of it), and at least 1.

    Raises
    ------
    ValueError
        If ``a4`` is not Hurwitz or ``alpha`` is not below its decay rate.
    """
    a4 = np.atleast_2d(np.asarray(a4, dtype=float))
    if a4.size == 0:
        return (1.0, 1.0)
    rate = _hurwitz_rate(a4)
    if alpha is None:
        alpha = 0.9 * rate
    if not 0 < alpha < rate:
        raise ValueError(f"alpha must lie in (0, {rate}), got {alpha}")
    _, upper = _weighted_norm_sup(a4, alpha)
    return float(alpha), max(1.0, upper)


def _check_decay(a4, alpha, beta):
    """Reject ``(alpha, beta)`` when some sampled time violates the decay estimate."""
    rate = _hurwitz_rate(a4)
    if not (0 < alpha <= rate * (1 + 1e-12) and beta >= 1):
        raise ValueError(f"need 0 < alpha <= {rate} and beta >= 1")
    lower, _ = _weighted_norm_sup(a4, alpha)
    if beta < lower * (1 - 1e-12):
        raise ValueError(f"(alpha, beta) = ({alpha}, {beta}) fails: ||exp(A4 t)|| exp(alpha t) reaches {lower:.6g}")


def bound_linear(bif: ByrnesIsidoriData, funnel, yref, eta0_radius: float,
                 alpha_beta: Optional[tuple] = None) -> FeasibilityBound:
    """Closed-form bound for linear systems with Hurwitz internal dynamics.

    ``M = ||G^{-1}|| ((||A1|| + (beta/alpha) ||A2|| ||A3||)(sup psi + sup|yref|)
    + beta ||A2|| eta0_radius + sup|psi'| + sup|yref'|)`` with spectral norms,
    where ``||exp(A4 t)|| <= beta exp(-alpha t)``.
    """
    if eta0_radius < 0:
        raise ValueError("eta0_radius must be nonnegative")
    a1, a2, a3, a4 = (np.atleast_2d(a) for a in (bif.a1, bif.a2, bif.a3, bif.a4))
    if alpha_beta is None:
        alpha, beta = decay_estimate(a4)
    else:
        alpha, beta = map(float, alpha_beta)
        if a4.size:
            _check_decay(a4, alpha, beta)
    norm = lambda a: float(np.linalg.norm(a, 2)) if a.size else 0.0
    g_max = norm(np.linalg.inv(np.atleast_2d(bif.gamma)))
    y_sup = float(funnel.psi_sup) + float(yref.sup)
    p_max = (norm(a1) + beta / alpha * norm(a2) * norm(a3)) * y_sup + beta * norm(a2) * eta0_radius
    psi_dot, yref_dot = float(funnel.psi_dot_sup), float(yref.dot_sup)
    descriptor = {"kind": "linear", "alpha": alpha, "beta": beta, "eta0_radius": eta0_radius}
    return FeasibilityBound(g_max * (p_max + psi_dot + yref_dot), p_max, g_max,
                            psi_dot, yref_dot, descriptor)


def witness_feedback(bif, funnel, yref, t0: float, x0):
    """Feedback ``(t, x) -> Gamma^{-1}(-p + phi(t0) e(t0) psi'(t) + yref'(t))``.

    ``x`` is in the coordinates of ``bif.to_coords``. The closed loop gives
    ``e(t) = phi(t0) e(t0) psi(t)``.
    """
    model = _as_model(bif)
    y0, _ = model.to_coords(np.asarray(x0, dtype=float))
    scale = float(funnel.phi(t0)) * (np.atleast_1d(y0) - np.atleast_1d(yref.value(t0)))

    def feedback(t, x):
        y, eta = model.to_coords(np.asarray(x, dtype=float))
        p = np.asarray(model.p(y[None], eta[None]))[0]
        G = np.asarray(model.gamma(y[None], eta[None]))[0]
        rhs = -p + scale * float(funnel.psi_dot(t)) + np.atleast_1d(yref.derivative(t))
        return np.linalg.solve(G, rhs)

    return feedback


@dataclass
class WitnessCheck:
    n_runs: int
    max_input_norm: float
    min_margin: float
    all_inside: bool
    failures: list = field(default_factory=list)

    def within(self, bound: float) -> bool:
        return self.all_inside and self.max_input_norm <= bound * (1 + 1e-9)


def check_witness(sys, bif, funnel, yref, initial_states, t0: float, duration: float,
                  int_cfg: IntegratorConfig = IntegratorConfig(), n_intervals: int = 100) -> WitnessCheck:
    """Simulate the witness feedback from each initial state; record input size and funnel margin."""
    grid = TimeGrid(t0, t0 + duration, n_intervals)
    u_max, margin, failures = 0.0, np.inf, []
    states = np.atleast_2d(np.asarray(initial_states, dtype=float))
    for x0 in states:
        res = integrate_closed_loop(sys, x0, witness_feedback(bif, funnel, yref, t0, x0), grid, int_cfg)
        if isinstance(res, EscapeReport):
            failures.append((x0.tolist(), res.reason))
            continue
        res.annotate(yref, funnel)
        u_max = max(u_max, float(np.linalg.norm(res.u, axis=1).max()))
        margin = min(margin, float(res.margins().min()))
        if not np.all(res.funnel_ratio() < 1.0):
            failures.append((x0.tolist(), "funnel"))
    return WitnessCheck(len(states), u_max, margin, not failures, failures)


@dataclass(frozen=True)
class Counterexample:
    """Initial data of ``y' = eta + u, eta' = 0`` that no input bounded by ``bound_m`` can handle."""

    bound_m: float
    horizon_T: float
    y0: float
    eta0: float
    error_lower_bound: float

    @property
    def initial_state(self) -> np.ndarray:
        return np.array([self.y0, self.eta0])

    @property
    def funnel(self):
        """Constant funnel of radius 1, which ``|e(T)| >= 2`` violates."""
        return constant_funnel(1.0)


def counterexample_eta0(M: float, T: float) -> Counterexample:
    """``eta0 = M + 2/T``: any ``|u| <= M`` gives ``e(T) >= T eta0 - T M = 2``."""
    if not (M > 0 and T > 0):
        raise ValueError("M and T must be positive")
    eta0 = M + 2.0 / T
    return Counterexample(M, T, 0.0, eta0, T * eta0 - T * M)
