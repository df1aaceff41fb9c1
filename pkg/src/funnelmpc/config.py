"""Experiment configuration files.

Configs are INI files with one section per concern::

    [model]        name, x0, model parameters
    [funnel]       kind = exponential (a, b, c) | constant (radius)
    [reference]    kind = constant (value) | cosine (amplitude, frequency)
    [controller]   kind = fmpc | classical_mpc | funnel_controller; degree; sample_dt
    [horizon]      t0, sim_end, T, delta, control_step
    [cost]         lambda_u, penalty_weight, quadrature, epsilon_guard
    [bound]        M
    [integrator]   substeps_per_interval, blowup_norm, method, step, rtol, atol
    [ocp]          max_iter, grad_tol, step_tol, fd_step, memory, restore_max_iter
    [feasibility]  method = general | linear; box; n_samples; safety; eta0_radius; alpha; beta
    [output]       directory

Lists are comma separated; matrices and boxes separate rows with ``;``.
Only keys present in the file are stored, and :func:`serialize` writes
them back in a canonical order, so ``serialize(parse(text))`` is a fixed
point of ``serialize . parse``.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Optional

import numpy as np

from . import systems
from .funnel import constant_funnel, constant_reference, cosine_reference, exponential_funnel
from .mpc import MpcConfig
from .ocp import OcpConfig
from .ode import IntegratorConfig
from .stagecost import CostConfig

__all__ = ["ConfigError", "ExperimentConfig", "parse", "serialize", "load"]


class ConfigError(ValueError):
    """Invalid configuration; the message names the field and the violated constraint."""

    def __init__(self, section: str, key: str, message: str):
        super().__init__(f"[{section}] {key}: {message}")
        self.section = section
        self.key = key


def _floats(text: str) -> list:
    return [float(v) for v in text.split(",") if v.strip()]


def _matrix(text: str) -> list:
    return [[float(v) for v in row.replace(",", " ").split()] for row in text.split(";") if row.strip()]


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        if value and isinstance(value[0], list):
            return "; ".join(" ".join(repr(float(v)) for v in row) for row in value)
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


MODEL_PARAMS = {
    "exothermic_reactor": ("c1", "c2", "k0", "k1", "d", "q", "x1_in", "x2_in", "b"),
    "mass_on_car": ("theta", "m1", "m2", "k", "d"),
}

SCHEMA: Dict[str, Dict[str, Callable]] = {
    "model": {"name": str, "x0": _floats, "A": _matrix, "B": _matrix, "C": _matrix,
              **{k: float for ks in MODEL_PARAMS.values() for k in ks}},
    "funnel": {"kind": str, "a": float, "b": float, "c": float, "radius": float},
    "reference": {"kind": str, "value": _floats, "amplitude": float, "frequency": float},
    "controller": {"kind": str, "degree": int, "sample_dt": float},
    "horizon": {"t0": float, "sim_end": float, "T": float, "delta": float, "control_step": float},
    "cost": {"lambda_u": float, "penalty_weight": float, "quadrature": str, "epsilon_guard": float},
    "bound": {"M": float},
    "integrator": {"substeps_per_interval": int, "blowup_norm": float, "method": str,
                   "step": float, "rtol": float, "atol": float},
    "ocp": {"max_iter": int, "grad_tol": float, "step_tol": float, "fd_step": float,
            "memory": int, "restore_max_iter": int},
    "feasibility": {"method": str, "box": _matrix, "n_samples": int, "safety": float,
                    "eta0_radius": float, "alpha": float, "beta": float,
                    "check_runs": int, "check_duration": float},
    "output": {"directory": str},
}

CONTROLLERS = ("fmpc", "classical_mpc", "funnel_controller")
CLOSED_LOOP_METHODS = ("rk4", "lsoda", "radau", "bdf")


@dataclass
class ExperimentConfig:
    """Parsed experiment; ``sections`` maps section -> key -> typed value."""

    sections: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    source: Optional[str] = None

    def get(self, section: str, key: str, default=None):
        return self.sections.get(section, {}).get(key, default)

    def require(self, section: str, key: str):
        value = self.get(section, key)
        if value is None:
            raise ConfigError(section, key, "required")
        return value

    @property
    def name(self) -> str:
        if self.source:
            return Path(self.source).stem
        return self.get("model", "name", "experiment")

    @property
    def controller(self) -> str:
        return self.get("controller", "kind", "fmpc")

    @property
    def is_mpc(self) -> bool:
        return self.controller in ("fmpc", "classical_mpc")

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(serialize(self).encode()).hexdigest()[:16]

    # --- object builders ---------------------------------------------------

    def system(self):
        name = self.require("model", "name")
        params = {k: self.get("model", k) for k in MODEL_PARAMS.get(name, ())
                  if self.get("model", k) is not None}
        if name == "exothermic_reactor":
            try:
                return systems.exothermic_reactor(systems.ReactorParams(**params))
            except ValueError as exc:
                raise ConfigError("model", "parameters", str(exc)) from None
        if name == "mass_on_car":
            try:
                return systems.mass_on_car(**params)
            except ValueError as exc:
                raise ConfigError("model", "parameters", str(exc)) from None
        if name == "scalar_integrator":
            return systems.scalar_integrator()
        if name == "counterexample":
            return systems.counterexample_system()
        if name == "linear":
            A, B, C = (np.array(self.require("model", k)) for k in ("A", "B", "C"))
            try:
                return systems.linear_system(A, B, C)
            except ValueError as exc:
                raise ConfigError("model", "A/B/C", str(exc)) from None
        raise ConfigError("model", "name", f"unknown model '{name}' (known: {', '.join(systems.MODELS)})")

    def x0(self) -> np.ndarray:
        return np.array(self.require("model", "x0"), dtype=float)

    def funnel(self):
        kind = self.get("funnel", "kind", "exponential")
        try:
            if kind == "exponential":
                return exponential_funnel(*(self.require("funnel", k) for k in ("a", "b", "c")))
            if kind == "constant":
                return constant_funnel(self.require("funnel", "radius"))
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError("funnel", kind, str(exc)) from None
        raise ConfigError("funnel", "kind", f"unknown funnel kind '{kind}'")

    def reference(self):
        kind = self.get("reference", "kind", "constant")
        if kind == "constant":
            return constant_reference(self.require("reference", "value"))
        if kind == "cosine":
            return cosine_reference(self.get("reference", "amplitude", 1.0),
                                    self.get("reference", "frequency", 1.0))
        raise ConfigError("reference", "kind", f"unknown reference kind '{kind}'")

    def cost_config(self) -> CostConfig:
        try:
            return CostConfig(lambda_u=self.get("cost", "lambda_u", 1.0),
                              quadrature=self.get("cost", "quadrature", "trapezoid"),
                              epsilon_guard=self.get("cost", "epsilon_guard", 1e-9),
                              penalty_weight=self.get("cost", "penalty_weight", 1e6))
        except ValueError as exc:
            raise ConfigError("cost", "values", str(exc)) from None

    def integrator_config(self) -> IntegratorConfig:
        try:
            return IntegratorConfig(self.get("integrator", "substeps_per_interval", 10),
                                    self.get("integrator", "blowup_norm", 1e9))
        except ValueError as exc:
            raise ConfigError("integrator", "values", str(exc)) from None

    def ocp_config(self) -> OcpConfig:
        keys = SCHEMA["ocp"]
        try:
            return OcpConfig(**{k: self.get("ocp", k) for k in keys if self.get("ocp", k) is not None})
        except ValueError as exc:
            raise ConfigError("ocp", "values", str(exc)) from None

    def mpc_config(self) -> MpcConfig:
        h = {k: self.require("horizon", k) for k in ("sim_end", "T", "delta", "control_step")}
        try:
            return MpcConfig(delta=h["delta"], horizon_T=h["T"], sim_end=h["sim_end"],
                             control_step=h["control_step"], bound_m=self.require("bound", "M"),
                             scheme="fmpc" if self.controller == "fmpc" else "classical",
                             cost_cfg=self.cost_config(), int_cfg=self.integrator_config(),
                             ocp=self.ocp_config())
        except ValueError as exc:
            raise ConfigError("horizon", "T/delta/control_step", str(exc)) from None

    # --- validation --------------------------------------------------------

    def validate(self) -> "ExperimentConfig":
        """Cross-field checks; raises :class:`ConfigError` on the first violation."""
        if self.controller not in CONTROLLERS:
            raise ConfigError("controller", "kind", f"must be one of {', '.join(CONTROLLERS)}")
        sys = self.system()
        x0 = self.x0()
        if x0.shape != (sys.state_dim,):
            raise ConfigError("model", "x0", f"needs {sys.state_dim} entries, got {len(x0)}")
        fs, yr = self.funnel(), self.reference()
        if yr.output_dim != sys.output_dim:
            raise ConfigError("reference", "value", f"needs {sys.output_dim} entries")
        t0 = self.get("horizon", "t0", 0.0)
        sim_end = self.require("horizon", "sim_end")
        if not sim_end > t0:
            raise ConfigError("horizon", "sim_end", f"must exceed t0 = {t0}")
        if self.is_mpc:
            delta, step = self.require("horizon", "delta"), self.require("horizon", "control_step")
            T = self.require("horizon", "T")
            if not (delta > 0 and step > 0 and T > 0):
                raise ConfigError("horizon", "T/delta/control_step", "must be positive")
            if not _is_multiple(delta, step):
                raise ConfigError("horizon", "delta", f"{delta} is not a multiple of control_step {step}")
            if T < delta:
                raise ConfigError("horizon", "T", f"{T} must be at least delta {delta}")
            if not _is_multiple(T, step):
                raise ConfigError("horizon", "T", f"{T} is not a multiple of control_step {step}")
            if not _is_multiple(sim_end - t0, delta):
                raise ConfigError("horizon", "sim_end", f"sim_end - t0 is not a multiple of delta {delta}")
            if not self.require("bound", "M") > 0:
                raise ConfigError("bound", "M", "must be positive")
            self.mpc_config()
        else:
            degree = self.get("controller", "degree", sys.relative_degree)
            if degree not in (1, 2, 3):
                raise ConfigError("controller", "degree", "must be 1, 2 or 3")
            sample_dt = self.get("controller", "sample_dt")
            if sample_dt is not None and not sample_dt > 0:
                raise ConfigError("controller", "sample_dt", "must be positive")
            method = self.get("integrator", "method", "lsoda")
            if method not in CLOSED_LOOP_METHODS:
                raise ConfigError("integrator", "method", f"must be one of {', '.join(CLOSED_LOOP_METHODS)}")
            if not self.get("integrator", "step", 1e-3) > 0:
                raise ConfigError("integrator", "step", "must be positive")
        e0 = np.atleast_1d(sys.h(x0)) - np.atleast_1d(yr.value(t0))
        ratio = float(fs.phi(t0)) * float(np.linalg.norm(e0))
        if not ratio < 1.0:
            raise ConfigError("model", "x0", f"initial state outside the funnel: phi(t0)*|e(t0)| = {ratio:.6g} >= 1")
        return self


def _is_multiple(a: float, b: float) -> bool:
    r = a / b
    return round(r) >= 1 and abs(r - round(r)) <= 1e-9 * max(1.0, r)


def parse(text: str, source: Optional[str] = None) -> ExperimentConfig:
    """Parse config text; unknown sections or keys and malformed values raise :class:`ConfigError`."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";;"), interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("file", "syntax", str(exc)) from None
    sections: Dict[str, Dict[str, Any]] = {}
    for name in cp.sections():
        if name not in SCHEMA:
            raise ConfigError(name, "*", f"unknown section (known: {', '.join(SCHEMA)})")
        out = {}
        for key, raw in cp[name].items():
            conv = SCHEMA[name].get(key)
            if conv is None:
                raise ConfigError(name, key, "unknown key")
            try:
                out[key] = conv(raw.strip())
            except ValueError:
                raise ConfigError(name, key, f"cannot parse {raw!r}") from None
        sections[name] = out
    return ExperimentConfig(sections, source)


def serialize(cfg: ExperimentConfig) -> str:
    """Canonical text: schema section order, schema key order, ``repr`` floats."""
    lines = []
    for name, keys in SCHEMA.items():
        values = cfg.sections.get(name)
        if not values:
            continue
        lines.append(f"[{name}]")
        for key in keys:
            if key in values:
                lines.append(f"{key} = {_fmt(values[key])}")
        lines.append("")
    return "\n".join(lines)


def load(path) -> ExperimentConfig:
    path = Path(path)
    return parse(path.read_text(), str(path))
