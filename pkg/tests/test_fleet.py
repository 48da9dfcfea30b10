import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import deploy
from mfcharge.dynamics import ConstraintSpec
from mfcharge.errors import MeshMisaligned
from mfcharge.fleet import (FleetState, build_mesh, continuum_occupancy, fleet_stats, interpolate_control,
                            mesh_condition_value, sample_initial_fleet, simulate, solver_mesh, step_soc,
                            step_transfers, transfer_count)
from mfcharge.grid import build_grid, build_modes, constant_rate, discretize_initial, uniform_density


# -- mesh ---------------------------------------------------------------------


def test_mesh_condition_value_worked_example():
    mesh = build_mesh(0.05, 450.0)
    assert mesh_condition_value(500, mesh, 0.002, 18000.0) == pytest.approx(2.5001, abs=1e-12)


def test_mesh_condition_limits():
    mesh = build_mesh(0.05, 450.0)
    big = mesh_condition_value(10**12, mesh, 0.002, 18000.0)
    assert big == pytest.approx(0.002 * 450.05, rel=1e-6)
    assert mesh_condition_value(10**15, mesh, 0.0, 18000.0) < 1e-9
    with pytest.raises(ValueError):
        mesh_condition_value(0, mesh, 0.0, 1.0)


def test_mesh_validation():
    with pytest.raises(MeshMisaligned):
        build_mesh(0.3, 1.0)
    with pytest.raises(MeshMisaligned):
        build_mesh(0.05, 7.0).n_steps(18000.0)
    assert build_mesh(0.1, 900.0).n_steps(18000.0) == 20


# -- transfer counts and SoC steps --------------------------------------------


@pytest.mark.parametrize("n,a,dr,cap,expected", [
    (10, 0.0002, 450.0, 1 / 3, 0),
    (10, 0.0002, 450.0, 1.0, 1),
    (10, 0.0, 450.0, 1.0, 0),
    (0, 0.01, 450.0, 1.0, 0),
    (5, 1.0, 450.0, 1.0, 5),   # clamped to the cell population
    (4, 0.25, 1.0, 0.5, 1),    # exact integer, floor and ceil agree
    (4, 0.25, 1.0, 1.0, 1),
])
def test_transfer_count(n, a, dr, cap, expected):
    assert transfer_count(n, a, dr, cap) == expected


def test_euler_charge_step(paper_grid):
    _, modes = paper_grid
    f = FleetState([0.5, 0.999, 0.0], [1, 1, 0], np.zeros(3))
    out = step_soc(f, modes, 450.0)
    assert out.soc[0] == pytest.approx(0.51, abs=1e-15)
    assert 0.999 < out.soc[1] < 1.0
    assert out.soc[2] == 0.0  # idle drain vanishes at empty


def test_zero_rate_mode_keeps_soc():
    grid = build_grid(10.0, 1.0, 0.1)
    modes = build_modes(grid, [("off", constant_rate(0.0), 0.0), ("on", constant_rate(0.0), 1.0)])
    f = FleetState(np.linspace(0, 1, 7), np.arange(7) % 2, np.zeros(7))
    np.testing.assert_array_equal(step_soc(f, modes, 5.0).soc, f.soc)


# -- STEP 1 -------------------------------------------------------------------


def _three_mode_setup():
    mesh = build_mesh(0.5, 1.0)
    fleet = FleetState([0.1, 0.2, 0.6, 0.7], [0, 0, 0, 0], np.zeros(4))
    a = np.zeros((6, 2))  # pairs (0,1) (0,2) (1,0) (1,2) (2,0) (2,1)
    a[0, :] = 1.0
    a[1, 1] = 1.0
    return mesh, fleet, a


def test_cap_reached_mid_sweep():
    mesh, fleet, a = _three_mode_setup()
    lo, hi = np.zeros(3), np.array([1.0, 2 / 4, 1.0])
    out, log = step_transfers(fleet, a, lo, hi, mesh, t_next=1.0)
    # cell 0 fills mode 1 to its cap; cell 1 can then only go to mode 2
    np.testing.assert_array_equal(out.mode, [1, 1, 2, 2])
    assert [(r.vehicle, r.source, r.dest) for r in log] == [(0, 0, 1), (1, 0, 1), (2, 0, 2), (3, 0, 2)]
    np.testing.assert_array_equal(out.entry_time, [1.0] * 4)


def test_lower_bound_blocks_departures():
    mesh, fleet, a = _three_mode_setup()
    lo, hi = np.array([0.5, 0, 0]), np.ones(3)
    out, _ = step_transfers(fleet, a, lo, hi, mesh, t_next=1.0)
    assert out.headcounts(3)[0] == 2


def test_zero_control_is_identity():
    mesh, fleet, a = _three_mode_setup()
    out, log = step_transfers(fleet, np.zeros_like(a), np.zeros(3), np.ones(3), mesh, t_next=1.0)
    assert log == []
    np.testing.assert_array_equal(out.mode, fleet.mode)
    np.testing.assert_array_equal(out.entry_time, fleet.entry_time)


def test_fifo_selects_earliest_entry():
    mesh = build_mesh(1.0, 1.0)
    fleet = FleetState([0.3] * 4, [0] * 4, [5.0, 1.0, 1.0, 3.0])
    a = np.array([[0.5], [0.0]])  # 4 * 0.5 = 2 vehicles to mode 1
    out, log = step_transfers(fleet, a, np.zeros(2), np.ones(2), mesh, t_next=9.0)
    assert [r.vehicle for r in log] == [1, 2]
    np.testing.assert_array_equal(out.mode, [0, 1, 1, 0])


def test_seeded_tie_breaking_is_reproducible():
    mesh = build_mesh(1.0, 1.0)
    fleet = FleetState([0.3] * 30, [0] * 30, np.zeros(30))
    a = np.array([[0.2], [0.0]])
    picks = [[r.vehicle for r in step_transfers(fleet, a, np.zeros(2), np.ones(2), mesh, 1.0,
                                                rng=np.random.default_rng(s))[1]] for s in (3, 3, 4)]
    assert picks[0] == picks[1]
    assert picks[0] != picks[2]
    assert len(picks[0]) == 6


@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 60), n_modes=st.integers(2, 3))
def test_headcount_conservation_and_caps(seed, n, n_modes):
    rng = np.random.default_rng(seed)
    mesh = build_mesh(0.25, 1.0)
    fleet = FleetState(rng.random(n), rng.integers(0, n_modes, n), rng.integers(0, 3, n).astype(float))
    counts = fleet.headcounts(n_modes)
    # bounds that the starting fleet satisfies, some of them tight
    hi = np.minimum(1.0, (counts + rng.integers(0, 3, n_modes)) / n)
    lo = np.maximum(0.0, (counts - rng.integers(0, 3, n_modes)) / n)
    a = rng.random((n_modes * (n_modes - 1), 4)) * rng.choice([0.0, 0.5, 3.0])
    out, log = step_transfers(fleet, a, lo, hi, mesh, t_next=1.0)
    after = out.headcounts(n_modes)
    assert after.sum() == n
    assert np.all(after <= np.ceil(n * hi - 1e-9))
    assert np.all(after >= np.floor(n * lo + 1e-9))
    assert len({r.vehicle for r in log}) == len(log)  # a vehicle moves at most once per step


# -- control interpolation ----------------------------------------------------


def test_interpolation_identity_on_solver_mesh(paper_grid, rng):
    grid, _ = paper_grid
    alpha = rng.random((grid.n_t, 2, grid.n_h))
    np.testing.assert_allclose(interpolate_control(alpha, grid, solver_mesh(grid)), alpha, atol=1e-15)


@pytest.mark.parametrize("kind", ["constant", "linear"])
def test_interpolation_of_constant(paper_grid, kind):
    grid, _ = paper_grid
    alpha = np.full((grid.n_t, 2, grid.n_h), 3e-4)
    out = interpolate_control(alpha, grid, build_mesh(0.1, 900.0), kind)
    assert out.shape == (20, 2, 10)
    np.testing.assert_allclose(out, 3e-4, rtol=1e-13)


def test_linear_interpolant_midpoint_average(paper_grid):
    grid, _ = paper_grid
    slope, icpt = 2e-3, 1e-4
    alpha = np.broadcast_to(icpt + slope * grid.centers, (grid.n_t, 2, grid.n_h)).copy()
    mesh = build_mesh(0.1, 450.0)
    out = interpolate_control(alpha, grid, mesh, "linear")
    mid = icpt + slope * (np.arange(mesh.n_u) + 0.5) * mesh.u
    # interior cells; the end cells see the constant extension past the outer centers
    np.testing.assert_allclose(out[:, :, 1:-1], np.broadcast_to(mid[1:-1], out[:, :, 1:-1].shape), rtol=1e-12)


def test_interpolation_time_averaging(paper_grid):
    grid, _ = paper_grid
    alpha = np.zeros((grid.n_t, 2, grid.n_h))
    alpha[::2] = 1.0
    out = interpolate_control(alpha, grid, build_mesh(0.05, 900.0))
    np.testing.assert_allclose(out, 0.5)


# -- sampling and full runs ---------------------------------------------------


def test_stratified_initial_sample(paper_grid):
    grid, _ = paper_grid
    m0 = discretize_initial([uniform_density(0.2, 0.6), None], grid)
    f = sample_initial_fleet(m0, grid, 400)
    assert np.all(f.mode == 0)
    np.testing.assert_allclose(np.sort(f.soc), 0.2 + 0.4 * (np.arange(400) + 0.5) / 400, atol=1e-12)


def test_zero_control_run(paper_grid):
    grid, modes = paper_grid
    m0 = discretize_initial([uniform_density(0.2, 0.6), uniform_density(0.3, 0.5, 0.0)], grid)
    m0[1, 6:10] = m0[0, 6:10]
    m0[0, 6:10] = 0.0
    fleet0 = sample_initial_fleet(m0, grid, 50)
    mesh = solver_mesh(grid)
    traj = simulate(fleet0, np.zeros((grid.n_t, 2, grid.n_h)), mesh, ConstraintSpec.unconstrained(grid.n_t, 2),
                    modes, grid)
    assert np.all(traj.headcounts == traj.headcounts[0])
    s = fleet0.soc.copy()
    for _ in range(grid.n_t):
        s = np.array([np.clip(x + modes[q].rate(np.array([x]))[0] * mesh.dr, 0, 1) for x, q in zip(s, fleet0.mode)])
    np.testing.assert_allclose(traj.soc[-1], s, atol=1e-15)
    assert traj.transfers == []


def test_single_vehicle_stats(paper_grid):
    grid, modes = paper_grid
    fleet0 = FleetState([0.4], [1], [0.0])
    traj = simulate(fleet0, np.zeros((grid.n_t, 2, grid.n_h)), solver_mesh(grid),
                    ConstraintSpec.unconstrained(grid.n_t, 2), modes, grid)
    stats = fleet_stats(traj, 0.7)
    assert stats.transfer_histogram == {0: 1}
    assert stats.fraction_below == 0.0
    assert traj.mesh_warning  # n = 1 makes the sampling term large
    assert stats.first_passage[0] == pytest.approx(0.3 * 45000, abs=450)


def test_continuum_occupancy_lookup(paper_grid):
    grid, _ = paper_grid
    m = np.zeros((grid.n_t + 1, 2, grid.n_h))
    m[:, 1, 0] = np.arange(grid.n_t + 1) / grid.h / 100
    occ = continuum_occupancy(m, grid, np.array([0.0, 449.0, 450.0, 18000.0]))
    np.testing.assert_allclose(occ, [0.0, 0.0, 0.01, 0.4])


# -- case-1 deployment properties (shared session solve) ----------------------


@pytest.mark.slow
def test_case1_cap_and_determinism(case1_solution):
    scenario, _, res = case1_solution
    t1 = deploy(scenario, res, 500)
    t2 = deploy(scenario, res, 500)
    assert np.all(t1.headcounts.sum(axis=1) == 500)
    assert t1.headcounts[:, 1].max() <= 166
    assert [(r.step, r.vehicle, r.source, r.dest) for r in t1.transfers] == \
           [(r.step, r.vehicle, r.source, r.dest) for r in t2.transfers]


@pytest.mark.slow
def test_case1_mean_field_consistency(case1_solution):
    scenario, _, res = case1_solution
    dists = []
    for n in (500, 5000, 50000):
        traj = deploy(scenario, res, n)
        cont = continuum_occupancy(res.m, scenario.grid, traj.times, 1)
        dists.append(fleet_stats(traj, 0.7, cont).sup_distance)
    print("sup-distance by fleet size 500/5000/50000:", dists)
    assert dists[0] >= dists[1] >= dists[2]


def test_mean_field_limit_with_exact_transport():
    """Courant number 1: the upwind scheme moves mass exactly one cell, like the Euler step."""
    from mfcharge.dynamics import advection_step, reaction_step
    from mfcharge.grid import piecewise_linear_rate

    grid = build_grid(4500.0, 450.0, 0.05)
    modes = build_modes(grid, [("idle", constant_rate(0.0), 0.0),
                               ("charge", piecewise_linear_rate([[0, 1 / 9000], [0.95, 1 / 9000], [1, 0]]), 1.0)])
    alpha = np.zeros((grid.n_t, 2, grid.n_h))
    alpha[0, 0] = 0.3 / grid.dt
    alpha[3, 0, 6:] = 0.5 / grid.dt
    alpha[5, 1] = 0.4 / grid.dt
    m0 = discretize_initial([uniform_density(0.2, 0.4), None], grid)
    m = [m0]
    for k in range(grid.n_t):
        half = reaction_step(m[-1], alpha[k] * m[-1][[0, 1]], grid.dt)
        m.append(np.stack([advection_step(half[i], md, grid) for i, md in enumerate(modes)]))
    m = np.array(m)
    mesh = solver_mesh(grid)
    dists = []
    for n in (500, 5000, 50000):
        traj = simulate(sample_initial_fleet(m0, grid, n), alpha, mesh, ConstraintSpec.unconstrained(grid.n_t, 2),
                        modes, grid)
        dists.append(fleet_stats(traj, 0.5, continuum_occupancy(m, grid, traj.times, 1)).sup_distance)
    print("exact transport sup-distance 500/5000/50000:", dists)
    assert dists[0] >= dists[1] >= dists[2]
    assert dists[2] < 1e-3
