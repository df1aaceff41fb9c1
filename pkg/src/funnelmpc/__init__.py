"""Receding-horizon output tracking inside a prescribed performance funnel.

The main entry points are :func:`funnelmpc.mpc.run` for closed-loop MPC,
:func:`funnelmpc.ocp.solve` for a single horizon, the continuous funnel
controllers in :mod:`funnelmpc.funnelctrl` and the input bounds in
:mod:`funnelmpc.feasibility`. ``funnelmpc`` on the command line runs
configured experiments.
"""

from .config import ConfigError, ExperimentConfig, load, parse, serialize
from .feasibility import FeasibilityBound, bound_general, bound_linear, counterexample_eta0
from .funnel import (FunnelSpec, ReferenceSignal, constant_funnel, constant_reference, cosine_reference,
                     exponential_funnel, funnel_margin, in_funnel)
from .funnelctrl import funnel_feedback, sampled_hold
from .mpc import MpcConfig, MpcRunReport, applied_feedback_value
from .mpc import run as run_mpc
from .ocp import OcpConfig, OcpProblem, OcpSolution, shift_warm_start, solve
from .ode import (ControlTrajectory, EscapeReport, IntegratorConfig, SimulationTrace, TimeGrid,
                  integrate_closed_loop, integrate_open_loop)
from .stagecost import CostConfig, horizon_cost
from .systems import (DynamicalSystem, ModelError, counterexample_system, exothermic_reactor,
                      linear_system, mass_on_car, scalar_integrator)

__version__ = "0.1.0"
