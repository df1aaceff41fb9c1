"""Control-affine models ``x' = f(x) + g(x) u, y = h(x)`` and the model library.

All model callbacks are batched: ``f`` maps ``(..., n) -> (..., n)``,
``g`` maps ``(..., n) -> (..., n, m)``, ``h`` maps ``(..., n) -> (..., m)``
and ``h_jacobian`` maps ``(..., n) -> (..., m, n)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.linalg import null_space

__all__ = [
    "ModelError",
    "ModelDomainError",
    "DynamicalSystem",
    "BifModel",
    "ByrnesIsidoriData",
    "HighFrequencyGainProbe",
    "linear_system",
    "byrnes_isidori_decompose",
    "linear_relative_degree",
    "ReactorParams",
    "exothermic_reactor",
    "mass_on_car",
    "scalar_integrator",
    "counterexample_system",
    "probe_relative_degree_one",
    "MODELS",
]


class ModelError(ValueError):
    """Invalid model construction."""


class ModelDomainError(ValueError):
    """Model evaluated outside its domain of definition."""


@dataclass(frozen=True)
class BifModel:
    """A system in Byrnes-Isidori coordinates ``(y, eta)``.

    ``p``, ``q`` and ``gamma`` take batched ``(K, m)`` outputs and
    ``(K, n - m)`` internal states; ``gamma`` returns ``(K, m, m)``.
    """

    output_dim: int
    internal_dim: int
    p: Callable
    q: Callable
    gamma: Callable
    to_coords: Callable
    from_coords: Callable


@dataclass(frozen=True)
class DynamicalSystem:
    state_dim: int
    input_dim: int
    f: Callable
    g: Callable
    h: Callable
    h_jacobian: Callable
    label: str = "system"
    in_domain: Optional[Callable] = None
    input_matrix: Optional[np.ndarray] = None
    matrices: Optional[tuple] = None
    relative_degree: int = 1
    bif: Optional[BifModel] = None
    params: dict = field(default_factory=dict)

    @property
    def output_dim(self) -> int:
        return self.input_dim

    @property
    def is_linear(self) -> bool:
        return self.matrices is not None

    def dynamics(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if self.input_matrix is not None:
            return self.f(x) + u @ self.input_matrix.T
        return self.f(x) + np.einsum("...ij,...j->...i", self.g(x), u)

    def output(self, x):
        return self.h(np.asarray(x, dtype=float))

    def gamma(self, x):
        """High-frequency gain ``h'(x) g(x)``."""
        x = np.asarray(x, dtype=float)
        return self.h_jacobian(x) @ self.g(x)


# --- linear systems -------------------------------------------------------

def linear_relative_degree(A, B, C, tol: float = 1e-10) -> Optional[int]:
    """Smallest ``r`` with ``C A^(r-1) B`` invertible and all earlier products zero."""
    A, B, C = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, C))
    n = A.shape[0]
    scale = max(1.0, np.linalg.norm(A, 2))
    P = B.copy()
    for r in range(1, n + 1):
        M = C @ P
        ref = tol * np.linalg.norm(C, 2) * np.linalg.norm(B, 2) * scale ** (r - 1)
        if np.linalg.norm(M, 2) > ref:
            if M.shape[0] == M.shape[1] and np.linalg.svd(M, compute_uv=False).min() > ref:
                return r
            return None
        P = A @ P
    return None


def linear_system(A, B, C, label: str = "linear", relative_degree_one: bool = False) -> DynamicalSystem:
    """``x' = A x + B u, y = C x``.

    With ``relative_degree_one`` the product ``CB`` must be invertible and the
    Byrnes-Isidori data are attached.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float)
    C = np.asarray(C, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    if C.ndim == 1:
        C = C[None, :]
    n = A.shape[0]
    if A.shape != (n, n) or B.shape[0] != n or C.shape[1] != n:
        raise ModelError(f"inconsistent shapes A{A.shape} B{B.shape} C{C.shape}")
    m = B.shape[1]
    if C.shape[0] != m:
        raise ModelError("output and input dimensions must agree")
    for M in (A, B, C):
        M.setflags(write=False)
    r = linear_relative_degree(A, B, C)
    bif = None
    if relative_degree_one:
        if r != 1:
            raise ModelError("CB is singular; the system does not have relative degree one")
        bif = byrnes_isidori_decompose(A, B, C).model()

    def g(x):
        return np.broadcast_to(B, np.shape(x)[:-1] + B.shape)

    def jac(x):
        return np.broadcast_to(C, np.shape(x)[:-1] + C.shape)

    return DynamicalSystem(
        state_dim=n, input_dim=m,
        f=lambda x: x @ A.T, g=g, h=lambda x: x @ C.T, h_jacobian=jac,
        label=label, input_matrix=B, matrices=(A, B, C),
        relative_degree=r if r is not None else 0, bif=bif,
    )


@dataclass(frozen=True)
class ByrnesIsidoriData:
    """Block form ``y' = a1 y + a2 eta + gamma u``, ``eta' = a3 y + a4 eta`` with ``(y, eta) = V x``."""

    a1: np.ndarray
    a2: np.ndarray
    a3: np.ndarray
    a4: np.ndarray
    gamma: np.ndarray
    transform_v: np.ndarray

    @property
    def output_dim(self) -> int:
        return self.a1.shape[0]

    @property
    def internal_dim(self) -> int:
        return self.a4.shape[0]

    def block_matrices(self):
        m, k = self.output_dim, self.internal_dim
        A = np.block([[self.a1, self.a2], [self.a3, self.a4]]) if k else self.a1.copy()
        B = np.vstack([self.gamma, np.zeros((k, m))])
        C = np.hstack([np.eye(m), np.zeros((m, k))])
        return A, B, C

    def as_system(self, label: str = "linear (BIF)") -> DynamicalSystem:
        return linear_system(*self.block_matrices(), label=label, relative_degree_one=True)

    def model(self) -> BifModel:
        m = self.output_dim
        V = self.transform_v
        V_inv = np.linalg.inv(V)
        a1, a2, a3, a4, G = self.a1, self.a2, self.a3, self.a4, self.gamma

        def p(y, eta):
            return y @ a1.T + eta @ a2.T

        def q(y, eta):
            return y @ a3.T + eta @ a4.T

        def gamma(y, eta):
            return np.broadcast_to(G, np.shape(y)[:-1] + G.shape)

        def to_coords(x):
            z = np.asarray(x) @ V.T
            return z[..., :m], z[..., m:]

        def from_coords(y, eta):
            return np.concatenate([y, eta], axis=-1) @ V_inv.T

        return BifModel(m, self.internal_dim, p, q, gamma, to_coords, from_coords)


def byrnes_isidori_decompose(A, B, C) -> ByrnesIsidoriData:
    """Coordinates ``(y, eta) = V x`` with ``V = [C; N]`` and ``N B = 0``.

    The rows of ``N`` are an orthonormal basis of ``ker(B^T)``, signed so
    that the first nonzero entry of each row is positive.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float)
    C = np.asarray(C, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    if C.ndim == 1:
        C = C[None, :]
    n, m = B.shape
    CB = C @ B
    if CB.shape != (m, m) or np.linalg.svd(CB, compute_uv=False).min() <= 1e-12 * max(1.0, np.abs(CB).max()):
        raise ModelError("CB is singular; no relative-degree-one Byrnes-Isidori form")
    N = null_space(B.T).T if n > m else np.zeros((0, n))
    N[np.abs(N) < 1e-15] = 0.0
    for row in N:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if nz.size and row[nz[0]] < 0:
            row *= -1
    V = np.vstack([C, N])
    V_inv = np.linalg.inv(V)
    T = V @ A @ V_inv
    return ByrnesIsidoriData(
        a1=T[:m, :m], a2=T[:m, m:], a3=T[m:, :m], a4=T[m:, m:],
        gamma=CB, transform_v=V,
    )


# --- nonlinear exothermic reactor -----------------------------------------

@dataclass(frozen=True)
class ReactorParams:
    c1: float = -1.0
    c2: float = 1.0
    k0: float = float(np.exp(25.0))
    k1: float = 8700.0
    d: float = 1.1
    q: float = 1.25
    x1_in: float = 1.0
    x2_in: float = 0.0
    b: float = 209.2

    def __post_init__(self):
        if not (self.b > 0 and self.d > 0 and self.q > 0):
            raise ModelError("reactor needs b, d, q > 0")
        if not self.c1 < 0:
            raise ModelError("reactor needs c1 < 0")
        if not (self.k0 > 0 and self.k1 > 0):
            raise ModelError("Arrhenius constants must be positive")
        if self.x1_in < 0 or self.x2_in < 0:
            raise ModelError("inflow concentrations must be nonnegative")


def exothermic_reactor(params: ReactorParams = ReactorParams()) -> DynamicalSystem:
    """Reactor with state ``(y, x1, x2)``: temperature, reactant, product.

    The reaction rate follows the Arrhenius law ``k0 exp(-k1 / y) x1`` and
    is undefined for ``y <= 0``.
    """
    P = params

    def rate(y, x1):
        return P.k0 * np.exp(-P.k1 / y) * x1

    def check(x):
        y = x[..., 0]
        if np.any(~(y > 0)):
            raise ModelDomainError("reactor temperature must stay positive")

    def f(x):
        x = np.asarray(x, dtype=float)
        check(x)
        y, x1, x2 = x[..., 0], x[..., 1], x[..., 2]
        r = rate(y, x1)
        return np.stack([P.b * r - P.q * y,
                         P.c1 * r + P.d * (P.x1_in - x1),
                         P.c2 * r + P.d * (P.x2_in - x2)], axis=-1)

    e1 = np.array([[1.0], [0.0], [0.0]])
    c = np.array([[1.0, 0.0, 0.0]])

    def p(y, eta):
        return (P.b * rate(y[..., 0], eta[..., 0]) - P.q * y[..., 0])[..., None]

    def q(y, eta):
        r = rate(y[..., 0], eta[..., 0])
        return np.stack([P.c1 * r + P.d * (P.x1_in - eta[..., 0]),
                         P.c2 * r + P.d * (P.x2_in - eta[..., 1])], axis=-1)

    bif = BifModel(
        output_dim=1, internal_dim=2, p=p, q=q,
        gamma=lambda y, eta: np.ones(np.shape(y)[:-1] + (1, 1)),
        to_coords=lambda x: (np.asarray(x)[..., :1], np.asarray(x)[..., 1:]),
        from_coords=lambda y, eta: np.concatenate([y, eta], axis=-1),
    )
    return DynamicalSystem(
        state_dim=3, input_dim=1, f=f,
        g=lambda x: np.broadcast_to(e1, np.shape(x)[:-1] + (3, 1)),
        h=lambda x: np.asarray(x)[..., :1],
        h_jacobian=lambda x: np.broadcast_to(c, np.shape(x)[:-1] + (1, 3)),
        label="exothermic_reactor",
        in_domain=lambda x: np.asarray(x)[..., 0] > 0,
        input_matrix=e1, relative_degree=1, bif=bif,
        params=dict(vars(P)),
    )


# --- mass on a car ----------------------------------------------------------

def mass_on_car(theta: float = np.pi / 4, m1: float = 4.0, m2: float = 1.0,
                k: float = 2.0, d: float = 1.0) -> DynamicalSystem:
    """Mass-spring-damper on a ramp mounted on a car, state ``(z, z', s, s')``.

    The output is the horizontal position of the mass, ``z + s cos(theta)``.
    Relative degree is 2 for ``0 < theta < pi/2`` and 3 for ``theta = 0``.
    """
    if not 0 <= theta < np.pi / 2:
        raise ModelError("theta must lie in [0, pi/2)")
    if not (m1 > 0 and m2 > 0 and k > 0 and d > 0):
        raise ModelError("masses, spring and damper constants must be positive")
    ct, st = np.cos(theta), np.sin(theta)
    mu = m2 * (m1 + m2 * st ** 2)
    mu1, mu2 = m1 / mu, m2 / mu
    A = np.array([
        [0, 1, 0, 0],
        [0, 0, mu2 * k * ct, mu2 * d * ct],
        [0, 0, 0, 1],
        [0, 0, -(mu1 + mu2) * k, -(mu1 + mu2) * d],
    ], dtype=float)
    B = np.array([[0.0], [mu2], [0.0], [-mu2 * ct]])
    C = np.array([[1.0, 0.0, ct, 0.0]])
    sys = linear_system(A, B, C, label="mass_on_car")
    return replace(sys, params=dict(theta=theta, m1=m1, m2=m2, k=k, d=d))


# --- small test systems ------------------------------------------------------

def scalar_integrator() -> DynamicalSystem:
    """``x' = u, y = x``."""
    return linear_system([[0.0]], [[1.0]], [[1.0]], label="scalar_integrator", relative_degree_one=True)


def counterexample_system() -> DynamicalSystem:
    """``y' = eta + u, eta' = 0``: no input bound works for every initial ``eta``."""
    return linear_system([[0.0, 1.0], [0.0, 0.0]], [[1.0], [0.0]], [[1.0, 0.0]],
                         label="counterexample", relative_degree_one=True)


@dataclass
class HighFrequencyGainProbe:
    eval_gamma: Callable
    min_singular_value_seen: float
    passed: bool
    failures: list = field(default_factory=list)


def probe_relative_degree_one(sys: DynamicalSystem, sample_points, tol: float = 1e-10) -> HighFrequencyGainProbe:
    """Check invertibility of ``h'(x) g(x)`` at each sample point."""
    pts = np.atleast_2d(np.asarray(sample_points, dtype=float))
    if pts.size == 0 or not np.all(np.isfinite(pts)):
        raise ValueError("sample points must be non-empty and finite")
    G = sys.gamma(pts)
    svals = np.linalg.svd(G, compute_uv=False).min(axis=-1)
    failures = [pts[i] for i in np.flatnonzero(svals <= tol)]
    return HighFrequencyGainProbe(sys.gamma, float(svals.min()), not failures, failures)


MODELS = {
    "exothermic_reactor": "nonlinear CSTR with Arrhenius kinetics, state (y, x1, x2)",
    "mass_on_car": "mass-spring system on a car, parameters theta, m1, m2, k, d",
    "linear": "x' = Ax + Bu, y = Cx from raw matrices",
    "scalar_integrator": "x' = u, y = x",
    "counterexample": "y' = eta + u, eta' = 0",
}
