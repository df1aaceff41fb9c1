import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import scalar_system
from funnelmpc.funnel import constant_funnel, constant_reference, exponential_funnel
from funnelmpc.ode import ControlTrajectory, IntegratorConfig, TimeGrid, integrate_open_loop
from funnelmpc.stagecost import (CostConfig, CostValue, evaluate_costs, funnel_stage, horizon_cost,
                                 horizon_cost_constrained, quadratic_stage)
from funnelmpc.systems import linear_system, scalar_integrator

ZERO = constant_reference(0.0)
UNIT = constant_funnel(1.0)


def test_quadratic_stage_examples(integrator):
    cfg = CostConfig(lambda_u=1.0)
    assert quadratic_stage(0.0, [0.0], [0.0], integrator, ZERO, cfg) == 0.0
    assert quadratic_stage(0.0, [2.0], [3.0], integrator, ZERO, cfg) == 13.0
    reactor_err = quadratic_stage(0.0, [270.0], [0.0], integrator, constant_reference(337.1), cfg)
    assert reactor_err == pytest.approx(4502.41)


def test_funnel_stage_examples(integrator):
    cfg = CostConfig(lambda_u=1.0)
    assert funnel_stage(0.0, [0.0], [0.0], integrator, UNIT, ZERO, cfg).value == 0.0
    half = constant_funnel(2.0)
    assert funnel_stage(0.0, [1.0], [2.0], integrator, half, ZERO, cfg).value == pytest.approx(13 / 3)
    edge = funnel_stage(0.0, [2.0], [0.0], integrator, half, ZERO, cfg)
    assert edge.boundary_hit and math.isinf(edge.value)


def test_cost_value_consistency():
    with pytest.raises(ValueError):
        CostValue(math.inf, boundary_hit=False)
    assert not CostValue.infinite(0.3).finite


def test_zero_dynamics_zero_cost():
    sys = scalar_system(lambda x: np.zeros_like(x))
    u = ControlTrajectory.constant(TimeGrid(0.0, 1.0, 5), 0.0)
    assert horizon_cost(sys, [0.0], u, UNIT, ZERO, CostConfig()).value == 0.0


def test_boundary_crossing_time():
    u = ControlTrajectory.constant(TimeGrid(0.0, 1.0, 4), 2.0)
    c = horizon_cost(scalar_integrator(), [0.0], u, UNIT, ZERO, CostConfig(), IntegratorConfig(10))
    assert c.boundary_hit
    assert c.first_violation_time == pytest.approx(0.5, abs=1e-12)


@pytest.mark.parametrize("lam", [0.0, 1.0, 0.01])
def test_horizon_cost_closed_form(lam):
    # y = t/2, so the integrand is 1/(1 - t^2/4) - 1 + lam/4 with antiderivative 2 atanh(t/2)
    u = ControlTrajectory.constant(TimeGrid(0.0, 1.0, 10), 0.5)
    c = horizon_cost(scalar_integrator(), [0.0], u, UNIT, ZERO, CostConfig(lambda_u=lam), IntegratorConfig(100))
    assert c.value == pytest.approx(2 * math.atanh(0.5) - 1 + lam / 4, abs=1e-6)


def test_quadrature_second_order():
    u = ControlTrajectory.constant(TimeGrid(0.0, 1.0, 1), 0.9)
    costs = [horizon_cost(scalar_integrator(), [0.0], u, UNIT, ZERO, CostConfig(), IntegratorConfig(s)).value
             for s in (4, 8, 16, 32)]
    d = np.abs(np.diff(costs))
    ratios = d[:-1] / d[1:]
    assert np.all((ratios >= 3) & (ratios <= 5)), ratios


def test_constrained_inside_equals_quadratic():
    u = ControlTrajectory.constant(TimeGrid(0.0, 1.0, 4), 0.3)
    cfg = CostConfig(lambda_u=0.5)
    c = horizon_cost_constrained(scalar_integrator(), [0.0], u, UNIT, ZERO, cfg, IntegratorConfig(50))
    free = horizon_cost_constrained(scalar_integrator(), [0.0], u, UNIT, ZERO, cfg, IntegratorConfig(50),
                                    output_constraint=False)
    assert c.violation == 0.0 and c.value == free.value
    # int_0^1 (0.3 t)^2 dt + 0.5 * 0.09
    assert c.value == pytest.approx(0.03 + 0.045, abs=1e-5)


def test_constrained_unit_excess_costs_one_weight():
    sys = scalar_system(lambda x: np.zeros_like(x))
    u = ControlTrajectory.constant(TimeGrid(0.0, 1.0, 2), 0.0)
    c = horizon_cost_constrained(sys, [2.0], u, UNIT, ZERO, CostConfig(penalty_weight=1e6))
    assert c.violation == pytest.approx(1.0)
    assert c.value == pytest.approx(4.0 + 1e6)
    assert c.first_violation_time == 0.0 and c.max_violation == pytest.approx(1.0)


def test_finite_cost_iff_strictly_inside():
    sys = scalar_integrator()
    grid = TimeGrid(0.0, 1.0, 5)
    icfg = IntegratorConfig(8)
    rng = np.random.default_rng(11)
    draws = rng.uniform(-3, 3, size=(200, 5))
    batch = evaluate_costs(sys, [0.2], draws[:, :, None], grid, UNIT, ZERO, CostConfig(), icfg)
    bad = 0
    for b in range(200):
        tr = integrate_open_loop(sys, [0.2], ControlTrajectory(grid, draws[b]), icfg)
        inside = bool(np.all(np.abs(tr.y[:, 0]) < 1.0))
        bad += inside != (not batch.infinite[b])
    assert bad == 0
    assert 0 < np.count_nonzero(batch.infinite) < 200


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=3, max_size=3), st.floats(0, 5), st.floats(0, 5))
def test_nonnegative_and_monotone_in_lambda(vals, lam_a, lam_b):
    sys = linear_system([[0.0, 1.0], [-1.0, -0.5]], [[0.0], [1.0]], [[1.0, 1.0]])
    u = ControlTrajectory(TimeGrid(0.0, 1.0, 3), vals)
    fs = exponential_funnel(3.0, 1.0, 0.5)
    lo, hi = sorted((lam_a, lam_b))
    a = horizon_cost(sys, [0.1, 0.0], u, fs, ZERO, CostConfig(lambda_u=lo))
    b = horizon_cost(sys, [0.1, 0.0], u, fs, ZERO, CostConfig(lambda_u=hi))
    assert a.finite == b.finite
    if a.finite:
        assert 0.0 <= a.value <= b.value


def test_relaxed_cost_finite_and_matches_inside():
    grid = TimeGrid(0.0, 1.0, 4)
    cfg = CostConfig(epsilon_guard=1e-3)
    vals = np.array([[[0.3]] * 4, [[2.0]] * 4])
    relaxed = evaluate_costs(scalar_integrator(), [0.0], vals, grid, UNIT, ZERO, cfg, kind="relaxed")
    strict = evaluate_costs(scalar_integrator(), [0.0], vals, grid, UNIT, ZERO, cfg)
    assert np.all(np.isfinite(relaxed.value))
    assert relaxed.value[0] == pytest.approx(strict.value[0])
    assert strict.infinite[1] and relaxed.value[1] > relaxed.value[0]


def test_escape_is_infinite():
    sys = scalar_system(lambda x: x ** 2)
    u = ControlTrajectory.constant(TimeGrid(0.0, 2.0, 4), 0.0)
    c = horizon_cost(sys, [1.0], u, constant_funnel(1e12), ZERO, CostConfig(), IntegratorConfig(20, 1e6))
    assert c.boundary_hit and c.reason == "escape"
