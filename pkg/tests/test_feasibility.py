import numpy as np
import pytest
from scipy.linalg import expm
from hypothesis import given, settings, strategies as st

from funnelmpc.feasibility import (FeasibilityBound, bound_general, bound_linear, check_witness,
                                   counterexample_eta0, decay_estimate, witness_feedback)
from funnelmpc.funnel import constant_funnel, constant_reference, cosine_reference, exponential_funnel
from funnelmpc.ode import ControlTrajectory, IntegratorConfig, TimeGrid, integrate_closed_loop, integrate_open_loop
from funnelmpc.systems import (ModelError, byrnes_isidori_decompose, counterexample_system, exothermic_reactor,
                               linear_system, mass_on_car)

ZERO = constant_reference(0.0)
UNIT = constant_funnel(1.0)
SCALAR_BIF = dict(A=[[0.0, 1.0], [0.0, -1.0]], B=[[1.0], [0.0]], C=[[1.0, 0.0]])


def scalar_example():
    sys = linear_system(SCALAR_BIF["A"], SCALAR_BIF["B"], SCALAR_BIF["C"], relative_degree_one=True)
    return sys, byrnes_isidori_decompose(*sys.matrices)


def sample_ball_states(rng, n, psi0, radius, yref0=0.0):
    states = []
    for _ in range(n):
        y = yref0 + rng.uniform(-0.99, 0.99) * psi0
        eta = rng.uniform(-radius, radius)
        states.append([y, eta])
    return np.array(states)


def test_record_validation():
    FeasibilityBound(2.0, 1.0, 1.0, 0.5, 0.5)
    with pytest.raises(ValueError):
        FeasibilityBound(1.0, 1.0, 1.0, 0.5, 0.5)
    with pytest.raises(ValueError):
        FeasibilityBound(np.inf, 1.0, 1.0, 0.0, 0.0)


def test_general_zero_drift_gives_zero():
    sys = linear_system([[0.0]], [[1.0]], [[1.0]], relative_degree_one=True)
    b = bound_general(sys, UNIT, constant_reference(2.0), [(-1.0, 3.0)])
    assert b.m_value == 0.0 and b.p_max == 0.0 and b.g_max == 1.0


@pytest.mark.parametrize("H", [0.5, 3.0])
def test_general_linear_example_p_max(H):
    b = bound_general(counterexample_system(), UNIT, ZERO, [(-1.0, 1.0), (-H, H)], n_samples=200, safety=1.0)
    assert b.p_max == pytest.approx(H)
    assert b.m_value == pytest.approx(H)


def test_general_rejects_bad_box_and_singular_gamma():
    with pytest.raises(ValueError):
        bound_general(counterexample_system(), UNIT, ZERO, [(-1.0, 1.0)])
    with pytest.raises(ValueError):
        bound_general(counterexample_system(), UNIT, ZERO, [(1.0, -1.0), (0.0, 1.0)])
    with pytest.raises(ModelError):
        bound_general(mass_on_car(), UNIT, ZERO, [(0, 1)] * 4)
    # the reactor rate is undefined at zero temperature
    with pytest.raises(ModelError, match="not finite"):
        bound_general(exothermic_reactor(), UNIT, ZERO, [(-10.0, 10.0), (0, 1), (0, 1)])


@settings(max_examples=40, deadline=None)
@given(st.floats(0.1, 3), st.floats(0.1, 3), st.floats(0.0, 2), st.floats(0.0, 2))
def test_general_monotone_in_box(y_hi, eta_hi, grow_y, grow_eta):
    sys, _ = scalar_example()
    small = bound_general(sys, UNIT, ZERO, [(-y_hi, y_hi), (-eta_hi, eta_hi)], n_samples=64)
    big = bound_general(sys, UNIT, ZERO, [(-y_hi - grow_y, y_hi + grow_y), (-eta_hi - grow_eta, eta_hi + grow_eta)],
                        n_samples=64)
    assert big.m_value >= small.m_value


def test_exothermic_bound_dominates_witness():
    sys = exothermic_reactor()
    fs, yr = exponential_funnel(100, 2, 1.5), constant_reference(337.1)
    b = bound_general(sys, fs, yr, [(235.6, 438.6), (0.0, 1.0), (0.0, 1.0)])
    assert np.isfinite(b.m_value) and b.psi_dot_sup == pytest.approx(200.0)
    rng = np.random.default_rng(1)
    states = np.column_stack([337.1 + rng.uniform(-0.9, 0.9, 10) * 101.5, rng.uniform(0, 1, (10, 2))])
    check = check_witness(sys, sys, fs, yr, states, 0.0, 1.0, IntegratorConfig(20), n_intervals=200)
    assert check.all_inside
    assert check.within(b.m_value)


def test_linear_scalar_example():
    _, bif = scalar_example()
    b = bound_linear(bif, UNIT, ZERO, 1.0, (1.0, 1.0))
    assert b.m_value == pytest.approx(1.0)
    assert b.compact_set_descriptor["kind"] == "linear"


def test_linear_decoupled_reduces():
    # A2 = 0: only the output block, the funnel slope and the reference slope remain
    A = [[-2.0, 0.0], [1.0, -1.0]]
    bif = byrnes_isidori_decompose(A, [[2.0], [0.0]], [[1.0, 0.0]])
    fs, yr = exponential_funnel(1.0, 1.0, 0.5), cosine_reference(1.0, 2.0)
    b = bound_linear(bif, fs, yr, 5.0)
    expected = 0.5 * (2.0 * (1.5 + 1.0) + 1.0 + 2.0)
    assert b.m_value == pytest.approx(expected)


def test_decay_estimate():
    alpha, beta = decay_estimate([[-1.0]])
    assert alpha == pytest.approx(0.9) and beta == pytest.approx(1.0)
    # non-normal: the transient peak near t = 2.35 must be covered
    A = np.array([[-1.0, 5.0], [0.0, -2.0]])
    a, bt = decay_estimate(A)
    ts = np.linspace(0, 40, 40001)
    peak = max(np.linalg.norm(expm(A * t), 2) * np.exp(a * t) for t in ts)
    assert peak <= bt <= peak * 1.002
    with pytest.raises(ValueError, match="Hurwitz"):
        decay_estimate([[0.0]])


def test_linear_rejects_invalid_decay_pair():
    _, bif = scalar_example()
    with pytest.raises(ValueError):
        bound_linear(bif, UNIT, ZERO, 1.0, (2.0, 1.0))
    with pytest.raises(ValueError, match="Hurwitz"):
        bound_linear(byrnes_isidori_decompose(*counterexample_system().matrices), UNIT, ZERO, 1.0)


def test_linear_bound_witness_and_restarts():
    sys, bif = scalar_example()
    b = bound_linear(bif, UNIT, ZERO, 1.0, (1.0, 1.0))
    rng = np.random.default_rng(9)
    states = sample_ball_states(rng, 50, 1.0, 1.0)
    check = check_witness(sys, sys, UNIT, ZERO, states, 0.0, 3.0)
    assert check.all_inside and check.within(b.m_value)
    tr = integrate_closed_loop(sys, states[0], witness_feedback(sys, UNIT, ZERO, 0.0, states[0]),
                               TimeGrid(0.0, 3.0, 300))
    for k in (50, 100, 150, 200, 250):
        again = check_witness(sys, sys, UNIT, ZERO, tr.x[k][None], float(tr.t[k]), 3.0)
        assert again.all_inside and again.within(b.m_value)


@pytest.mark.parametrize("M, T, eta0", [(1.0, 1.0, 3.0), (10.0, 0.5, 14.0)])
def test_counterexample_certificate(M, T, eta0):
    c = counterexample_eta0(M, T)
    assert c.eta0 == eta0 and c.error_lower_bound == pytest.approx(2.0)
    assert c.funnel.psi(T) == 1.0
    sys = counterexample_system()
    grid = TimeGrid(0.0, T, 10)
    tr = integrate_open_loop(sys, c.initial_state, ControlTrajectory.constant(grid, -M))
    assert tr.y[-1, 0] == pytest.approx(2.0, abs=1e-12)
    rng = np.random.default_rng(4)
    for _ in range(20):
        u = ControlTrajectory(grid, rng.uniform(-M, M, 10), bound_m=M)
        assert integrate_open_loop(sys, c.initial_state, u).y[-1, 0] >= 2.0 - 1e-9
    with pytest.raises(ValueError):
        counterexample_eta0(0.0, 1.0)
