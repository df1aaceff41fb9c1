"""Model-free funnel feedback laws of relative degree one, two and three."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .ode import FeedbackSingularity

__all__ = [
    "alpha",
    "gamma_sat",
    "deg1_law",
    "deg2_law",
    "deg3_law",
    "FunnelFeedback",
    "funnel_feedback",
    "SampledHold",
    "sampled_hold",
]


def alpha(s):
    """``1 / (1 - s)`` on ``s < 1``."""
    if not s < 1.0:
        raise FeedbackSingularity(f"alpha argument {s:.6g} outside (-1, 1)")
    return 1.0 / (1.0 - s)


def gamma_sat(s):
    """``s / (1 - s^2)`` on ``|s| < 1``."""
    if not abs(s) < 1.0:
        raise FeedbackSingularity(f"gamma argument {s:.6g} outside (-1, 1)")
    return s / (1.0 - s * s)


def deg1_law(phi: float, e) -> np.ndarray:
    """``u = -e / (1 - phi^2 ||e||^2)``."""
    e = np.atleast_1d(np.asarray(e, dtype=float))
    z = phi * phi * float(e @ e)
    if not z < 1.0:
        raise FeedbackSingularity(f"error on or outside the funnel boundary (phi|e| = {np.sqrt(z):.6g})")
    return -e / (1.0 - z)


def deg2_law(phi: float, e: float, e_dot: float) -> float:
    w = phi * e_dot + alpha(phi * phi * e * e) * phi * e
    return -alpha(w * w) * w


def deg3_law(phi: float, e: float, e_dot: float, e_ddot: float) -> float:
    w = phi * e_ddot + gamma_sat(phi * e_dot + gamma_sat(phi * e))
    return -gamma_sat(w)


@dataclass(frozen=True)
class FunnelFeedback:
    """Funnel controller ``(t, x) -> u`` for a model of known relative degree.

    For degree two and three the error derivatives are computed from a
    linear model: ``e' = CAx - yref'`` and ``e'' = CA^2 x - yref''``.
    """

    degree: int
    funnel: object
    yref: object
    sys: object

    def __post_init__(self):
        if self.degree not in (1, 2, 3):
            raise ValueError("supported degrees are 1, 2 and 3")
        if self.degree > 1:
            if not self.sys.is_linear:
                raise ValueError("degree 2 and 3 laws need a linear model for the error derivatives")
            if self.sys.output_dim != 1:
                raise ValueError("degree 2 and 3 laws are scalar-output only")

    def error_derivatives(self, t: float, x) -> tuple:
        """``(e, e', e'')`` at ``(t, x)``; derivatives are ``None`` when not needed."""
        x = np.asarray(x, dtype=float)
        e = np.atleast_1d(self.sys.h(x)) - np.atleast_1d(self.yref.value(t))
        if self.degree == 1:
            return e, None, None
        A, _, C = self.sys.matrices
        CA = C @ A
        e_dot = float((CA @ x)[0]) - float(np.atleast_1d(self.yref.derivative(t))[0])
        e_ddot = None
        if self.degree == 3:
            e_ddot = float((CA @ A @ x)[0]) - float(np.atleast_1d(self.yref.second_derivative(t))[0])
        return e, e_dot, e_ddot

    def __call__(self, t: float, x) -> np.ndarray:
        phi = float(self.funnel.phi(t))
        e, e_dot, e_ddot = self.error_derivatives(t, x)
        try:
            if self.degree == 1:
                return deg1_law(phi, e)
            if self.degree == 2:
                return np.array([deg2_law(phi, float(e[0]), e_dot)])
            return np.array([deg3_law(phi, float(e[0]), e_dot, e_ddot)])
        except FeedbackSingularity as exc:
            raise FeedbackSingularity(str(exc), t) from None


def funnel_feedback(sys, funnel, yref, degree: Optional[int] = None) -> FunnelFeedback:
    """Funnel controller matched to ``sys.relative_degree`` unless ``degree`` is given."""
    return FunnelFeedback(degree or sys.relative_degree or 1, funnel, yref, sys)


class SampledHold:
    """Zero-order hold of a feedback law at multiples of ``sample_dt``.

    The held value is computed from the first state seen in each sampling
    period. A query exactly at a sampling instant first returns the left
    limit (the RK4 end-of-step stage), and the next query at that instant
    samples, so an integrator grid aligned with the sampling instants
    reproduces an exact zero-order hold.

    Holds mutable state: use one instance per simulation and call
    :meth:`reset` before reuse.
    """

    def __init__(self, feedback: Callable, sample_dt: float, t0: float = 0.0):
        if not sample_dt > 0:
            raise ValueError("sample_dt must be positive")
        self.feedback = feedback
        self.sample_dt = float(sample_dt)
        self.t0 = float(t0)
        self.reset()

    def reset(self) -> None:
        self._period = None
        self._held = None
        self._boundary_seen = None

    def _locate(self, t):
        r = (t - self.t0) / self.sample_dt
        k = round(r)
        if abs(r - k) <= 1e-9 * max(1.0, abs(r)):
            return int(k), True
        return int(np.floor(r)), False

    def __call__(self, t: float, x) -> np.ndarray:
        k, at_boundary = self._locate(t)
        if self._period is not None and k > self._period and at_boundary and self._boundary_seen != k:
            self._boundary_seen = k
            return self._held
        if self._period is None or k != self._period:
            self._held = np.asarray(self.feedback(t, x), dtype=float)
            self._period = k
        return self._held


def sampled_hold(feedback: Callable, sample_dt: float, t0: float = 0.0) -> SampledHold:
    return SampledHold(feedback, sample_dt, t0)
