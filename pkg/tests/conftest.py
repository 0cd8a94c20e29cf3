import numpy as np
import pytest

from dislocq.equilibrium import edge_problem, outer_iteration, screw_problem, solve_screw_3d
from dislocq.mesh import generate_ball_mesh, generate_disk_mesh

ACCEPTANCE_LINES = []


def record_criterion(number, title, passed, detail):
    ACCEPTANCE_LINES.append((number, f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def disk():
    return generate_disk_mesh(1.0, 0.1)


@pytest.fixture(scope="session")
def coarse_disk():
    return generate_disk_mesh(1.0, 0.25)


@pytest.fixture(scope="session")
def small_ball():
    return generate_ball_mesh(0.2, 0.05)


@pytest.fixture(scope="session")
def edge_solution(disk):
    spec = edge_problem(disk, 0.05)
    psi, report = outer_iteration(spec)
    return spec, psi, report


@pytest.fixture(scope="session")
def screw_solution(small_ball):
    spec = screw_problem(small_ball, 0.1, alpha=1.0, beta_w=1.0)
    psi, report = solve_screw_3d(spec)
    return spec, psi, report


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
