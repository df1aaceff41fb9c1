import sys

import numpy as np
import pytest

from funnelmpc.systems import DynamicalSystem, linear_system


def scalar_system(f, label="scalar"):
    """``x' = f(x) + u, y = x`` on the real line."""
    one = np.ones((1, 1))
    return DynamicalSystem(
        state_dim=1, input_dim=1, f=f,
        g=lambda x: np.broadcast_to(one, np.shape(x)[:-1] + (1, 1)),
        h=lambda x: x, h_jacobian=lambda x: np.broadcast_to(one, np.shape(x)[:-1] + (1, 1)),
        label=label, input_matrix=one,
    )


@pytest.fixture
def integrator():
    return linear_system([[0.0]], [[1.0]], [[1.0]], relative_degree_one=True)


@pytest.fixture
def decay():
    return linear_system([[-1.0]], [[1.0]], [[1.0]], relative_degree_one=True)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, (title, passed, detail) in sorted(acceptance.RESULTS.items()):
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}")
