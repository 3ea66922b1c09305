import numpy as np
import pytest

from chi_ilqr.hybrid import open_loop, simulate
from chi_ilqr.models import hopper as hop
from chi_ilqr.models import quadruped as quad


@pytest.fixture(scope="session")
def hopper():
    return hop.hopper_system()


@pytest.fixture(scope="session")
def hopper_guess_traj(hopper):
    """Open-loop rollout of the hopper initial guess: one touchdown and one liftoff."""
    task = hop.hopper_task()
    U = hop.hopper_initial_guess(task)
    return simulate(hopper, task.x0, task.mode0, open_loop(U), 0.0, task.duration, task.N)


@pytest.fixture(scope="session")
def quadruped():
    return quad.quadruped_system()


@pytest.fixture(scope="session")
def quadruped_guess_traj(quadruped):
    task = quad.quadruped_task()
    U = quad.quadruped_initial_guess(task, system=quadruped)
    return simulate(quadruped, task.x0, task.mode0, open_loop(U), 0.0, task.duration, task.N)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_support import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(RESULTS):
        ok, detail = RESULTS[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'} {detail}")
