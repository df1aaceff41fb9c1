"""Funnel functions, reference signals and funnel membership tests.

A funnel function ``phi`` is bounded with a positive infimum; the
performance funnel is ``{(t, e) : phi(t) ||e|| < 1}`` and its radius is
``psi = 1 / phi``. Norms are Euclidean throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "FunnelSpec",
    "ReferenceSignal",
    "exponential_funnel",
    "constant_funnel",
    "tabulated_funnel",
    "constant_reference",
    "cosine_reference",
    "in_funnel",
    "funnel_margin",
]


@dataclass(frozen=True)
class FunnelSpec:
    """Funnel function ``phi`` together with its radius ``psi = 1/phi``.

    All four callables accept scalars or arrays of times.
    ``sup_norms`` holds ``phi``, ``phi_dot``, ``psi``, ``psi_dot`` sup norms
    over ``t >= 0``.
    """

    phi: Callable
    phi_dot: Callable
    psi: Callable
    psi_dot: Callable
    inf_phi: float
    sup_norms: dict
    kind: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.inf_phi > 0:
            raise ValueError("funnel function must have a positive infimum")

    @property
    def psi_dot_sup(self) -> float:
        return self.sup_norms["psi_dot"]

    @property
    def psi_sup(self) -> float:
        return self.sup_norms["psi"]


def exponential_funnel(a: float, b: float, c: float) -> FunnelSpec:
    """``phi(t) = 1 / (a exp(-b t) + c)``; the radius shrinks from ``a + c`` to ``c``."""
    if not (a > 0 and b > 0 and c > 0):
        raise ValueError("exponential funnel needs a, b, c > 0")

    def psi(t):
        return a * np.exp(-b * np.asarray(t, dtype=float)) + c

    def psi_dot(t):
        return -a * b * np.exp(-b * np.asarray(t, dtype=float))

    def phi(t):
        return 1.0 / psi(t)

    def phi_dot(t):
        return -psi_dot(t) / psi(t) ** 2

    # a*b*exp(-bt)/psi^2 = b*s/(s+c)^2 with s = a exp(-bt) in (0, a]; peak at s = c
    phi_dot_sup = b / (4 * c) if c <= a else a * b / (a + c) ** 2
    sup = {"phi": 1.0 / c, "phi_dot": phi_dot_sup, "psi": a + c, "psi_dot": a * b}
    return FunnelSpec(phi, phi_dot, psi, psi_dot, inf_phi=1.0 / (a + c), sup_norms=sup,
                      kind="exponential", params={"a": a, "b": b, "c": c})


def constant_funnel(radius: float) -> FunnelSpec:
    """Funnel of constant radius, ``phi = 1/radius``."""
    if not radius > 0:
        raise ValueError("radius must be positive")

    def phi(t):
        return np.full(np.shape(t), 1.0 / radius) if np.ndim(t) else 1.0 / radius

    def psi(t):
        return np.full(np.shape(t), float(radius)) if np.ndim(t) else float(radius)

    def zero(t):
        return np.zeros(np.shape(t)) if np.ndim(t) else 0.0

    sup = {"phi": 1.0 / radius, "phi_dot": 0.0, "psi": float(radius), "psi_dot": 0.0}
    return FunnelSpec(phi, zero, psi, zero, inf_phi=1.0 / radius, sup_norms=sup,
                      kind="constant", params={"radius": radius})


def tabulated_funnel(times, radii) -> FunnelSpec:
    """Piecewise-linear radius through ``(times[i], radii[i])``, held constant outside.

    Allows non-monotone funnels (e.g. widening over a later interval).
    """
    times = np.asarray(times, dtype=float)
    radii = np.asarray(radii, dtype=float)
    if times.ndim != 1 or times.shape != radii.shape or len(times) < 2:
        raise ValueError("need matching 1-D arrays with at least two points")
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    if np.any(radii <= 0):
        raise ValueError("radii must be positive")
    slopes = np.diff(radii) / np.diff(times)

    def psi(t):
        return np.interp(t, times, radii)

    def psi_dot(t):
        t_arr = np.asarray(t, dtype=float)
        idx = np.clip(np.searchsorted(times, t_arr, side="right") - 1, 0, len(slopes) - 1)
        out = np.where((t_arr < times[0]) | (t_arr >= times[-1]), 0.0, slopes[idx])
        return out if np.ndim(t) else float(out)

    def phi(t):
        return 1.0 / psi(t)

    def phi_dot(t):
        return -psi_dot(t) / psi(t) ** 2

    sup = {"phi": 1.0 / radii.min(), "phi_dot": float(np.max(np.abs(slopes) / np.minimum(radii[:-1], radii[1:]) ** 2)),
           "psi": float(radii.max()), "psi_dot": float(np.abs(slopes).max())}
    return FunnelSpec(phi, phi_dot, psi, psi_dot, inf_phi=1.0 / radii.max(), sup_norms=sup,
                      kind="tabulated", params={"times": times.tolist(), "radii": radii.tolist()})


@dataclass(frozen=True)
class ReferenceSignal:
    """Reference ``y_ref`` with first and second derivatives.

    ``value(t)`` returns shape ``(m,)`` for scalar ``t`` and ``(len(t), m)``
    for an array of times.
    """

    value: Callable
    derivative: Callable
    second_derivative: Callable
    output_dim: int
    sup_norms: dict
    kind: str = "custom"
    params: dict = field(default_factory=dict)

    @property
    def sup(self) -> float:
        return self.sup_norms["yref"]

    @property
    def dot_sup(self) -> float:
        return self.sup_norms["yref_dot"]


def _vectorize(fun, m):
    def wrapped(t):
        t_arr = np.asarray(t, dtype=float)
        out = fun(t_arr.reshape(-1))
        return out[0] if t_arr.ndim == 0 else out.reshape(t_arr.shape + (m,))
    return wrapped


def constant_reference(value) -> ReferenceSignal:
    value = np.atleast_1d(np.asarray(value, dtype=float))
    m = len(value)
    val = _vectorize(lambda t: np.tile(value, (len(t), 1)), m)
    zero = _vectorize(lambda t: np.zeros((len(t), m)), m)
    sup = {"yref": float(np.linalg.norm(value)), "yref_dot": 0.0}
    return ReferenceSignal(val, zero, zero, m, sup, kind="constant",
                           params={"value": value.tolist() if m > 1 else float(value[0])})


def cosine_reference(amplitude: float = 1.0, frequency: float = 1.0) -> ReferenceSignal:
    """Scalar reference ``amplitude * cos(frequency * t)``."""
    A, w = float(amplitude), float(frequency)
    val = _vectorize(lambda t: (A * np.cos(w * t))[:, None], 1)
    dot = _vectorize(lambda t: (-A * w * np.sin(w * t))[:, None], 1)
    ddot = _vectorize(lambda t: (-A * w * w * np.cos(w * t))[:, None], 1)
    sup = {"yref": abs(A), "yref_dot": abs(A * w)}
    return ReferenceSignal(val, dot, ddot, 1, sup, kind="cosine",
                           params={"amplitude": A, "frequency": w})


def in_funnel(fs: FunnelSpec, t: float, e, strict: bool = True) -> bool:
    """Whether ``phi(t) ||e|| < 1`` (``<= 1`` when ``strict`` is False)."""
    r = float(fs.phi(t)) * float(np.linalg.norm(np.atleast_1d(e)))
    return r < 1.0 if strict else r <= 1.0


def funnel_margin(fs: FunnelSpec, t: float, e) -> float:
    """Signed distance ``psi(t) - ||e||`` to the funnel boundary."""
    return float(fs.psi(t)) - float(np.linalg.norm(np.atleast_1d(e)))
