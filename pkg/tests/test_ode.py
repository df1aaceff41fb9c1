import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import scalar_system
from funnelmpc.funnel import constant_funnel, constant_reference
from funnelmpc.ode import (ControlTrajectory, EscapeReport, FeedbackSingularity, IntegratorConfig,
                           SimulationTrace, TimeGrid, integrate_closed_loop, integrate_closed_loop_stiff,
                           integrate_open_loop)
from funnelmpc.systems import mass_on_car


def test_grid_validation():
    with pytest.raises(ValueError):
        TimeGrid(1.0, 1.0, 3)
    with pytest.raises(ValueError):
        TimeGrid(0.0, 1.0, 0)
    with pytest.raises(ValueError):
        TimeGrid.from_step(0.0, 1.0, 0.3)
    assert TimeGrid.from_step(0.0, 0.5, 0.05).n_intervals == 10


@given(st.floats(-100, 100), st.floats(1e-3, 50), st.integers(1, 500), st.integers(1, 8))
def test_grid_nodes_exact(t0, span, n, subs):
    grid = TimeGrid(t0, t0 + span, n)
    nodes = grid.nodes(subs)
    k = np.arange(n * subs + 1)
    assert np.array_equal(nodes, t0 + k * grid.span / (n * subs))
    assert nodes[0] == t0


def test_control_trajectory_bound_and_lookup():
    grid = TimeGrid(0.0, 1.0, 4)
    with pytest.raises(ValueError):
        ControlTrajectory(grid, [1.0, 2.0, 3.0, 4.0], bound_m=3.0)
    with pytest.raises(ValueError):
        ControlTrajectory(grid, [1.0, 2.0, 3.0])
    u = ControlTrajectory(grid, [1.0, 2.0, 3.0, 4.0])
    assert u(0.0)[0] == 1.0
    assert u(0.2499)[0] == 1.0
    assert u(0.25)[0] == 2.0
    assert u(1.0)[0] == 4.0
    assert u.max_norm() == 4.0


def test_integrator_input_one_exact(integrator):
    grid = TimeGrid(0.0, 1.0, 1)
    tr = integrate_open_loop(integrator, [0.0], ControlTrajectory.constant(grid, 1.0))
    assert tr.x[-1, 0] == pytest.approx(1.0, abs=1e-15)


def test_linear_decay_closed_form(decay):
    grid = TimeGrid(0.0, 1.0, 1)
    tr = integrate_open_loop(decay, [1.0], ControlTrajectory.constant(grid, 0.0), IntegratorConfig(100))
    assert abs(tr.x[-1, 0] - np.exp(-1.0)) < 1e-9


def test_blowup_reports_escape_time():
    sys = scalar_system(lambda x: x ** 2)
    grid = TimeGrid(0.0, 2.0, 20)
    res = integrate_open_loop(sys, [1.0], ControlTrajectory.constant(grid, 0.0), IntegratorConfig(50, 1e6))
    assert isinstance(res, EscapeReport)
    assert res.reason == "blowup"
    # the exact solution 1/(1-t) passes 1e6 at t = 1 - 1e-6
    assert res.time == pytest.approx(1.0, abs=5e-3)


def test_closed_loop_zero_feedback_constant_state():
    sys = scalar_system(lambda x: np.zeros_like(x))
    tr = integrate_closed_loop(sys, [3.0], lambda t, x: np.zeros(1), TimeGrid(0.0, 1.0, 5))
    assert np.all(tr.x == 3.0)
    assert np.all(tr.u == 0.0)


def test_closed_loop_linear_feedback(integrator):
    tr = integrate_closed_loop(integrator, [1.0], lambda t, x: -x, TimeGrid(0.0, 1.0, 10),
                               IntegratorConfig(10))
    assert abs(tr.x[-1, 0] - np.exp(-1.0)) < 1e-9


@pytest.mark.parametrize("start_h", [0.1, 0.05])
def test_rk4_order(decay, start_h):
    errs = []
    for i in range(4):
        n = int(round(1.0 / (start_h / 2 ** i)))
        tr = integrate_open_loop(decay, [1.0], ControlTrajectory.constant(TimeGrid(0.0, 1.0, n), 0.0),
                                 IntegratorConfig(1))
        errs.append(abs(tr.x[-1, 0] - np.exp(-1.0)))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all((ratios >= 14) & (ratios <= 18)), ratios


def test_constant_input_matches_constant_feedback_bitwise():
    sys = mass_on_car()
    grid = TimeGrid(0.0, 2.0, 8)
    x0 = np.array([0.1, -0.2, 0.3, 0.0])
    a = integrate_open_loop(sys, x0, ControlTrajectory.constant(grid, 1.7), IntegratorConfig(7))
    b = integrate_closed_loop(sys, x0, lambda t, x: np.array([1.7]), grid, IntegratorConfig(7))
    assert np.array_equal(a.x, b.x)
    assert np.array_equal(a.t, b.t)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_determinism(values):
    sys = mass_on_car()
    u = ControlTrajectory(TimeGrid(0.0, 1.0, 4), values)
    a = integrate_open_loop(sys, np.zeros(4), u)
    b = integrate_open_loop(sys, np.zeros(4), u)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.u, b.u)


def test_feedback_singularity_becomes_escape(integrator):
    def fb(t, x):
        if t > 0.5:
            raise FeedbackSingularity("boom")
        return np.zeros(1)

    res = integrate_closed_loop(integrator, [0.0], fb, TimeGrid(0.0, 1.0, 10))
    assert isinstance(res, EscapeReport)
    assert res.reason == "feedback singularity"
    assert 0.5 <= res.time <= 0.61


def test_stiff_integrator_matches_closed_form(integrator):
    tr = integrate_closed_loop_stiff(integrator, [1.0], lambda t, x: -x, TimeGrid(0.0, 1.0, 10))
    assert abs(tr.x[-1, 0] - np.exp(-1.0)) < 1e-7
    assert np.allclose(tr.u[:, 0], -tr.x[:, 0])


def test_trace_annotation_and_csv_round_trip(tmp_path, integrator):
    tr = integrate_open_loop(integrator, [0.0], ControlTrajectory.constant(TimeGrid(0.0, 1.0, 4), 0.5),
                             IntegratorConfig(2))
    tr.annotate(constant_reference(0.0), constant_funnel(2.0))
    assert np.allclose(tr.funnel_ratio(), np.abs(tr.x[:, 0]) / 2.0)
    assert np.allclose(tr.margins(), 2.0 - np.abs(tr.x[:, 0]))
    tr.to_csv(tmp_path / "t.csv")
    back = SimulationTrace.from_csv(tmp_path / "t.csv")
    assert np.allclose(back.x, tr.x) and np.allclose(back.err_norm, tr.err_norm)
