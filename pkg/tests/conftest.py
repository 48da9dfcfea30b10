import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mfcharge.grid import build_grid, build_modes, constant_rate, piecewise_linear_rate

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny():
    """2 modes, 5 steps, 4 SoC cells; charging mode with Courant number 0.5."""
    grid = build_grid(5.0, 1.0, 0.25)
    modes = build_modes(grid, [("idle", constant_rate(0.0), 0.0),
                               ("charge", piecewise_linear_rate([[0, 0.125], [0.75, 0.125], [1, 0]]), 10.0)])
    return grid, modes


@pytest.fixture
def paper_grid():
    grid = build_grid(18000.0, 450.0, 0.05)
    modes = build_modes(grid, [
        ("idle", constant_rate(-3.86e-7), 0.0),
        ("charging", piecewise_linear_rate([[0, 1 / 45000], [0.75, 1 / 45000], [1, 0]]), 20.0),
    ])
    return grid, modes


def random_feasible(grid, modes, rng, fill=0.9):
    """Random normalized m0 and flows meeting the per-cell transfer capacity along the rollout."""
    from mfcharge.dynamics import advection_step, reaction_step
    from mfcharge.grid import mode_pairs

    n_i = len(modes)
    pairs = mode_pairs(n_i)
    m0 = rng.random((n_i, grid.n_h))
    m0 /= m0.sum() * grid.h
    e = np.zeros((grid.n_t, len(pairs), grid.n_h))
    m = m0.copy()
    for k in range(grid.n_t):
        for i in range(n_i):
            out = [p for p, (a, _) in enumerate(pairs) if a == i]
            share = rng.dirichlet(np.ones(len(out)), size=grid.n_h).T * rng.random(grid.n_h) * fill
            e[k, out] = share * m[i] / grid.dt
        half = reaction_step(m, e[k], grid.dt)
        m = np.stack([advection_step(half[i], md, grid) for i, md in enumerate(modes)])
    return m0, e


# --------------------------------------------------------------------------
# full case-study solves, computed once per session


@pytest.fixture(scope="session")
def case1_solution():
    from mfcharge.scenarios import build_case1
    from mfcharge.solver import build_saddle_problem, solve

    scenario = build_case1()
    problem = build_saddle_problem(scenario)
    return scenario, problem, solve(problem, scenario.solver_params, log_every=0)


@pytest.fixture(scope="session")
def case2_solution():
    from mfcharge.scenarios import build_case2
    from mfcharge.solver import build_saddle_problem, solve

    scenario = build_case2()
    problem = build_saddle_problem(scenario)
    return scenario, problem, solve(problem, scenario.solver_params, log_every=0)


def deploy(scenario, result, n, seed=None, mesh=None):
    """Sample, interpolate and simulate a solved scenario on ``n`` vehicles."""
    from mfcharge.fleet import interpolate_control, sample_initial_fleet, simulate
    from mfcharge.solver import extract_alpha

    mesh = mesh or scenario.deployment
    alpha = extract_alpha(result.m, result.e)
    a = interpolate_control(alpha, scenario.grid, mesh)
    fleet0 = sample_initial_fleet(scenario.initial, scenario.grid, n, seed)
    return simulate(fleet0, a, mesh, scenario.constraints, scenario.modes, scenario.grid)


# --------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion


ACCEPTANCE_LINES: dict = {}


def record_criterion(key: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {detail}"
    ACCEPTANCE_LINES[key] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES, key=lambda k: (len(k.split()[0]), k)):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
