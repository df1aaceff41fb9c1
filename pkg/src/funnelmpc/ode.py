"""Fixed-step RK4 integration of control-affine systems.

Inputs are either piecewise constant on a uniform control grid (open loop)
or produced by a feedback callable ``(t, x) -> u`` (closed loop). Substeps
are aligned with the control intervals, so the integrator never steps
across a discontinuity of a step-function input.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.integrate import solve_ivp

__all__ = [
    "TimeGrid",
    "ControlTrajectory",
    "IntegratorConfig",
    "SimulationTrace",
    "EscapeReport",
    "FeedbackSingularity",
    "integrate_open_loop",
    "integrate_closed_loop",
    "integrate_closed_loop_stiff",
    "integrate_batch",
]


class FeedbackSingularity(ArithmeticError):
    """Raised by a feedback law that cannot be evaluated at ``(t, x)``."""

    def __init__(self, message: str, time: float = float("nan")):
        super().__init__(message)
        self.time = time


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on ``[t_start, t_end]`` with ``n_intervals`` cells."""

    t_start: float
    t_end: float
    n_intervals: int

    def __post_init__(self):
        if not (np.isfinite(self.t_start) and np.isfinite(self.t_end)):
            raise ValueError("grid end points must be finite")
        if not self.t_end > self.t_start:
            raise ValueError(f"t_end={self.t_end} must exceed t_start={self.t_start}")
        if int(self.n_intervals) != self.n_intervals or self.n_intervals < 1:
            raise ValueError("n_intervals must be a positive integer")
        object.__setattr__(self, "n_intervals", int(self.n_intervals))

    @classmethod
    def from_step(cls, t_start: float, duration: float, step: float, rtol: float = 1e-9) -> "TimeGrid":
        """Grid of length ``duration`` whose spacing is ``step``.

        ``duration`` must be an integer multiple of ``step`` up to ``rtol``.
        """
        ratio = duration / step
        n = int(round(ratio))
        if n < 1 or abs(ratio - n) > rtol * max(1.0, ratio):
            raise ValueError(f"duration {duration} is not a multiple of step {step}")
        return cls(t_start, t_start + duration, n)

    @property
    def span(self) -> float:
        return self.t_end - self.t_start

    @property
    def step(self) -> float:
        return self.span / self.n_intervals

    def node(self, k: int) -> float:
        return self.t_start + k * self.span / self.n_intervals

    def nodes(self, substeps: int = 1) -> np.ndarray:
        total = self.n_intervals * substeps
        return self.t_start + np.arange(total + 1) * self.span / total

    def interval_index(self, t: float) -> int:
        """Index ``k`` with ``t`` in ``[t_k, t_{k+1})``; the end point maps to the last cell."""
        k = int(np.floor((t - self.t_start) / self.step + 1e-9))
        return min(max(k, 0), self.n_intervals - 1)


@dataclass(frozen=True)
class ControlTrajectory:
    """Piecewise-constant input, ``values[k]`` held on ``[t_k, t_{k+1})``."""

    grid: TimeGrid
    values: np.ndarray
    bound_m: float = np.inf

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[0] != self.grid.n_intervals:
            raise ValueError(
                f"expected {self.grid.n_intervals} input values, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("input values must be finite")
        if self.bound_m < 0:
            raise ValueError("bound_m must be nonnegative")
        norms = np.linalg.norm(values, axis=1)
        if np.any(norms > self.bound_m * (1 + 1e-12) + 1e-12):
            raise ValueError(
                f"input norm {norms.max():.6g} exceeds bound {self.bound_m:.6g}"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def input_dim(self) -> int:
        return self.values.shape[1]

    @classmethod
    def constant(cls, grid: TimeGrid, value, bound_m: float = np.inf) -> "ControlTrajectory":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(grid, np.tile(value, (grid.n_intervals, 1)), bound_m)

    def __call__(self, t: float) -> np.ndarray:
        return self.values[self.grid.interval_index(t)]

    def max_norm(self) -> float:
        return float(np.linalg.norm(self.values, axis=1).max())


@dataclass(frozen=True)
class IntegratorConfig:
    substeps_per_interval: int = 10
    blowup_norm: float = 1e9

    def __post_init__(self):
        if int(self.substeps_per_interval) != self.substeps_per_interval or self.substeps_per_interval < 1:
            raise ValueError("substeps_per_interval must be a positive integer")
        if not self.blowup_norm > 0:
            raise ValueError("blowup_norm must be positive")


@dataclass
class SimulationTrace:
    """Time-indexed record of a simulation.

    ``y`` is always filled; ``yref``, ``err_norm`` and ``funnel_radius`` are
    ``None`` until :meth:`annotate` attaches a reference and a funnel.
    """

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    y: np.ndarray
    yref: Optional[np.ndarray] = None
    err_norm: Optional[np.ndarray] = None
    funnel_radius: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.t)

    def annotate(self, yref=None, funnel=None) -> "SimulationTrace":
        """Fill reference, error norm and funnel radius columns in place."""
        if yref is not None:
            self.yref = np.asarray(yref.value(self.t)).reshape(len(self.t), -1)
            self.err_norm = np.linalg.norm(self.y - self.yref, axis=1)
        if funnel is not None:
            self.funnel_radius = np.asarray(funnel.psi(self.t), dtype=float) * np.ones(len(self.t))
        return self

    def margins(self) -> np.ndarray:
        """Signed distance ``psi(t) - ||e(t)||`` at each node."""
        if self.err_norm is None or self.funnel_radius is None:
            raise ValueError("trace has no funnel annotation")
        return self.funnel_radius - self.err_norm

    def funnel_ratio(self) -> np.ndarray:
        """``phi(t) ||e(t)||`` at each node."""
        if self.err_norm is None or self.funnel_radius is None:
            raise ValueError("trace has no funnel annotation")
        return self.err_norm / self.funnel_radius

    @staticmethod
    def concatenate(parts: Sequence["SimulationTrace"]) -> "SimulationTrace":
        """Join consecutive segments; the shared node is taken from the later segment."""
        if not parts:
            raise ValueError("nothing to concatenate")
        keep = [slice(0, len(p) - 1) for p in parts[:-1]] + [slice(0, len(parts[-1]))]

        def cat(name):
            cols = [getattr(p, name) for p in parts]
            if any(c is None for c in cols):
                return None
            return np.concatenate([c[s] for c, s in zip(cols, keep)])

        return SimulationTrace(**{name: cat(name) for name in
                                  ("t", "x", "u", "y", "yref", "err_norm", "funnel_radius")})

    def to_csv(self, path) -> None:
        n, m = self.x.shape[1], self.y.shape[1]
        header = (["t"] + [f"x_{i + 1}" for i in range(n)] + [f"y_{i + 1}" for i in range(m)]
                  + [f"u_{i + 1}" for i in range(m)] + [f"yref_{i + 1}" for i in range(m)]
                  + ["err_norm", "funnel_radius"])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i in range(len(self.t)):
                row = [self.t[i], *self.x[i], *self.y[i], *self.u[i]]
                row += list(self.yref[i]) if self.yref is not None else [""] * m
                row.append(self.err_norm[i] if self.err_norm is not None else "")
                row.append(self.funnel_radius[i] if self.funnel_radius is not None else "")
                w.writerow([repr(float(v)) if v != "" else "" for v in row])

    @classmethod
    def from_csv(cls, path) -> "SimulationTrace":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]

        def cols(prefix):
            idx = [i for i, h in enumerate(header) if h.startswith(prefix + "_") and h[len(prefix) + 1:].isdigit()]
            if not idx or any(r[idx[0]] == "" for r in body):
                return None
            return np.array([[float(r[i]) for i in idx] for r in body])

        def col(name):
            i = header.index(name)
            if any(r[i] == "" for r in body):
                return None
            return np.array([float(r[i]) for r in body])

        return cls(t=col("t"), x=cols("x"), u=cols("u"), y=cols("y"), yref=cols("yref"),
                   err_norm=col("err_norm"), funnel_radius=col("funnel_radius"))


@dataclass
class EscapeReport:
    """Integration stopped before the end of the horizon."""

    time: float
    last_state: np.ndarray
    reason: str  # "blowup", "non-finite", "domain", "feedback singularity"
    trace: Optional[SimulationTrace] = field(default=None, repr=False)

    def __bool__(self) -> bool:
        # lets callers write ``if isinstance(...)`` or test truthiness of a trace alike
        return False


Result = Union[SimulationTrace, EscapeReport]


def integrate_batch(sys, x0: np.ndarray, grid: TimeGrid, cfg: IntegratorConfig,
                    values: Optional[np.ndarray] = None,
                    feedback: Optional[Callable] = None):
    """Integrate ``B`` trajectories at once.

    Parameters
    ----------
    x0 : (B, n) or (n,) array
    values : (B, N, m) or (N, m) array of held inputs (open loop), or None
    feedback : callable ``(t, x) -> u`` on ``(B, n)`` states (closed loop), or None

    Returns
    -------
    times : (N*s + 1,) node times
    states : (B, N*s + 1, n)
    inputs : (B, N*s + 1, m), the input recorded at each node
    fail : (B,) index of the last good node for escaped rows, ``-1`` otherwise
    reasons : list of failure reasons (``None`` for healthy rows)

    A feedback that raises :class:`FeedbackSingularity` aborts the whole
    batch; callers with ``B > 1`` should use open-loop inputs.
    """
    if (values is None) == (feedback is None):
        raise ValueError("pass exactly one of values or feedback")
    x0 = np.asarray(x0, dtype=float)
    x = np.atleast_2d(x0).copy()
    B, n = x.shape
    if n != sys.state_dim:
        raise ValueError(f"state has dimension {n}, system expects {sys.state_dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("initial state must be finite")
    m = sys.input_dim
    N, s = grid.n_intervals, cfg.substeps_per_interval
    if values is not None:
        values = np.asarray(values, dtype=float)
        if values.ndim == 2:
            values = np.broadcast_to(values, (B,) + values.shape)
        if values.shape != (B, N, m):
            raise ValueError(f"expected inputs of shape {(B, N, m)}, got {values.shape}")

    times = grid.nodes(s)
    h = grid.span / (N * s)
    states = np.empty((B, N * s + 1, n))
    inputs = np.empty((B, N * s + 1, m))
    states[:, 0] = x
    fail = np.full(B, -1)
    reasons: list = [None] * B
    alive = np.ones(B, dtype=bool)
    in_domain = getattr(sys, "in_domain", None)

    def field_at(xs, u, x_safe, bad):
        if in_domain is not None:
            ok = in_domain(xs)
            if not np.all(ok):
                bad |= ~ok
                xs = np.where(ok[:, None], xs, x_safe)
        return sys.dynamics(xs, u)

    def control(t, xs):
        u = np.asarray(feedback(t, xs), dtype=float).reshape(B, m)
        if not np.all(np.isfinite(u)):
            raise FeedbackSingularity("feedback returned a non-finite value", t)
        return u

    with np.errstate(all="ignore"):
        j = 0
        for k in range(N):
            for _ in range(s):
                t = times[j]
                bad = np.zeros(B, dtype=bool)
                if feedback is None:
                    u1 = u2 = u3 = u4 = values[:, k]
                    k1 = field_at(x, u1, x, bad)
                    k2 = field_at(x + 0.5 * h * k1, u2, x, bad)
                    k3 = field_at(x + 0.5 * h * k2, u3, x, bad)
                    k4 = field_at(x + h * k3, u4, x, bad)
                else:
                    u1 = control(t, x)
                    k1 = field_at(x, u1, x, bad)
                    x2 = x + 0.5 * h * k1
                    k2 = field_at(x2, control(t + 0.5 * h, x2), x, bad)
                    x3 = x + 0.5 * h * k2
                    k3 = field_at(x3, control(t + 0.5 * h, x3), x, bad)
                    x4 = x + h * k3
                    k4 = field_at(x4, control(t + h, x4), x, bad)
                inputs[:, j] = u1
                x_new = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
                finite = np.all(np.isfinite(x_new), axis=1)
                big = np.zeros(B, dtype=bool)
                big[finite] = np.linalg.norm(x_new[finite], axis=1) > cfg.blowup_norm
                if in_domain is not None:
                    bad |= finite & ~in_domain(np.where(finite[:, None], x_new, x))
                newly = alive & (bad | ~finite | big)
                if np.any(newly):
                    for b in np.flatnonzero(newly):
                        fail[b] = j
                        reasons[b] = ("domain" if bad[b] else
                                      "non-finite" if not finite[b] else "blowup")
                    alive &= ~newly
                x = np.where(alive[:, None], x_new, x)
                j += 1
                states[:, j] = x
        if feedback is None:
            inputs[:, -1] = values[:, -1]
        else:
            inputs[:, -1] = control(times[-1], x)

    return times, states, inputs, fail, reasons


def _trace(sys, times, states, inputs) -> SimulationTrace:
    return SimulationTrace(t=times.copy(), x=states.copy(), u=inputs.copy(),
                           y=np.asarray(sys.h(states)).reshape(len(times), -1))


def _single_rk4(sys, t, x, h, u_of):
    u1 = u_of(t, x)
    k1 = sys.dynamics(x, u1)
    x2 = x + 0.5 * h * k1
    k2 = sys.dynamics(x2, u_of(t + 0.5 * h, x2))
    x3 = x + 0.5 * h * k2
    k3 = sys.dynamics(x3, u_of(t + 0.5 * h, x3))
    x4 = x + h * k3
    k4 = sys.dynamics(x4, u_of(t + h, x4))
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _bisect_escape(sys, t_a, x_a, h, u_of, cfg, max_iter=20000):
    """Refine the escape time inside a failed substep by step halving."""
    in_domain = getattr(sys, "in_domain", None)
    t_b = t_a + h
    h_min = 1e-12 * max(1.0, abs(t_b))
    with np.errstate(all="ignore"):
        for _ in range(max_iter):
            if h < h_min:
                break
            h_try = min(h, t_b - t_a)
            if h_try <= 0:
                break
            try:
                if in_domain is not None and not np.all(in_domain(x_a[None, :])):
                    raise ArithmeticError
                x_try = _single_rk4(sys, t_a, x_a[None, :], h_try, u_of)[0]
            except (ArithmeticError, ValueError):
                x_try = None
            ok = (x_try is not None and np.all(np.isfinite(x_try))
                  and np.linalg.norm(x_try) <= cfg.blowup_norm
                  and (in_domain is None or bool(np.all(in_domain(x_try[None, :])))))
            if ok:
                t_a, x_a = t_a + h_try, x_try
            else:
                h *= 0.5
    return t_a, x_a


def integrate_open_loop(sys, x0, u: ControlTrajectory, cfg: IntegratorConfig = IntegratorConfig()) -> Result:
    """Response of ``sys`` to the step-function input ``u`` from ``x0``.

    Returns a :class:`SimulationTrace` sampled at every substep node, or an
    :class:`EscapeReport` if the state leaves the model domain, becomes
    non-finite, or its norm exceeds ``cfg.blowup_norm``.
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (sys.state_dim,):
        raise ValueError(f"x0 must have shape ({sys.state_dim},), got {x0.shape}")
    if u.input_dim != sys.input_dim:
        raise ValueError(f"input has dimension {u.input_dim}, system expects {sys.input_dim}")
    times, states, inputs, fail, reasons = integrate_batch(
        sys, x0[None, :], u.grid, cfg, values=u.values[None])
    if fail[0] < 0:
        return _trace(sys, times, states[0], inputs[0])
    j = int(fail[0])
    k = min(j // cfg.substeps_per_interval, u.grid.n_intervals - 1)
    h = times[1] - times[0]
    t_esc, x_last = _bisect_escape(sys, times[j], states[0, j], h,
                                   lambda t, x: u.values[k][None, :], cfg)
    partial = _trace(sys, times[: j + 1], states[0, : j + 1], inputs[0, : j + 1])
    return EscapeReport(time=float(t_esc), last_state=x_last, reason=reasons[0], trace=partial)


def integrate_closed_loop(sys, x0, feedback: Callable, horizon: TimeGrid,
                          cfg: IntegratorConfig = IntegratorConfig()) -> Result:
    """Integrate ``x' = f(x) + g(x) feedback(t, x)`` over ``horizon``.

    ``feedback`` receives a single state vector. If it raises
    :class:`FeedbackSingularity` or returns a non-finite value, the result is
    an :class:`EscapeReport` with reason ``"feedback singularity"``.
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (sys.state_dim,):
        raise ValueError(f"x0 must have shape ({sys.state_dim},), got {x0.shape}")

    def batched(t, xs):
        return np.asarray(feedback(t, xs[0]), dtype=float).reshape(1, -1)

    last = {"t": horizon.t_start, "x": x0}

    def tracking(t, xs):
        last["t"], last["x"] = t, xs[0]
        return batched(t, xs)

    try:
        times, states, inputs, fail, reasons = integrate_batch(
            sys, x0[None, :], horizon, cfg, feedback=tracking)
    except FeedbackSingularity as exc:
        t_bad = exc.time if np.isfinite(exc.time) else last["t"]
        return EscapeReport(time=float(t_bad), last_state=np.asarray(last["x"]).copy(),
                            reason="feedback singularity")
    if fail[0] < 0:
        return _trace(sys, times, states[0], inputs[0])
    j = int(fail[0])
    h = times[1] - times[0]
    try:
        t_esc, x_last = _bisect_escape(sys, times[j], states[0, j], h, batched, cfg)
    except FeedbackSingularity as exc:
        t_esc, x_last = exc.time, states[0, j]
    partial = _trace(sys, times[: j + 1], states[0, : j + 1], inputs[0, : j + 1])
    return EscapeReport(time=float(t_esc), last_state=x_last, reason=reasons[0], trace=partial)


def integrate_closed_loop_stiff(sys, x0, feedback: Callable, horizon: TimeGrid,
                                substeps: int = 1, method: str = "LSODA",
                                rtol: float = 1e-8, atol: float = 1e-10,
                                blowup_norm: float = 1e9) -> Result:
    """Adaptive implicit-capable integration of a smooth closed loop.

    High-gain feedback near the funnel boundary makes the closed loop stiff,
    which forces explicit fixed-step schemes onto tiny steps. This variant
    hands the loop to :func:`scipy.integrate.solve_ivp` and samples the dense
    solution on ``horizon.nodes(substeps)``. ``feedback`` must be memoryless
    (no sampled hold).
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (sys.state_dim,):
        raise ValueError(f"x0 must have shape ({sys.state_dim},), got {x0.shape}")
    in_domain = getattr(sys, "in_domain", None)
    last = {"t": horizon.t_start, "x": x0}

    def rhs(t, x):
        if not np.all(np.isfinite(x)) or (in_domain is not None and not in_domain(x[None])[0]):
            raise _OutOfDomain(t, x)
        last["t"], last["x"] = t, x
        u = np.asarray(feedback(t, x), dtype=float)
        if not np.all(np.isfinite(u)):
            raise FeedbackSingularity("feedback returned a non-finite value", t)
        return sys.dynamics(x, u)

    def blowup(t, x):
        return np.linalg.norm(x) - blowup_norm
    blowup.terminal = True

    times = horizon.nodes(substeps)
    try:
        sol = solve_ivp(rhs, (times[0], times[-1]), x0, method=method, t_eval=times,
                        rtol=rtol, atol=atol, events=blowup)
    except FeedbackSingularity as exc:
        t_bad = exc.time if np.isfinite(exc.time) else last["t"]
        return EscapeReport(float(t_bad), np.asarray(last["x"]).copy(), "feedback singularity")
    except _OutOfDomain as exc:
        return EscapeReport(float(exc.time), np.asarray(last["x"]).copy(), "domain")
    states = sol.y.T
    inputs = np.array([np.asarray(feedback(t, x), dtype=float).reshape(-1)
                       for t, x in zip(sol.t, states)]).reshape(len(sol.t), sys.input_dim)
    trace = _trace(sys, sol.t, states, inputs)
    if sol.status == 1 or len(sol.t) < len(times):
        t_end = float(sol.t_events[0][0]) if sol.t_events and len(sol.t_events[0]) else float(sol.t[-1])
        return EscapeReport(t_end, states[-1].copy(), "blowup", trace)
    if sol.status < 0:
        return EscapeReport(float(sol.t[-1]), states[-1].copy(), "non-finite", trace)
    return trace


class _OutOfDomain(Exception):
    def __init__(self, time, x):
        super().__init__(f"state left the model domain at t={time}")
        self.time = time
        self.x = x
