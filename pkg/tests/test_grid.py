import numpy as np
import pytest
from hypothesis import given, strategies as st

from mfcharge.errors import IndexOutOfRange, InvalidRate, NonIntegerGrid, NotNormalized
from mfcharge.grid import (Histogram, VariableLayout, build_grid, build_modes, ceil_cells, constant_rate,
                           discretize_initial, incidence, make_mode, mode_pairs, piecewise_linear_rate,
                           total_mass, uniform_density)


def test_build_grid_case_study():
    g = build_grid(18000, 450, 0.05)
    assert (g.n_t, g.n_h) == (40, 20)
    assert g.times[-1] == 18000
    assert build_grid(1, 1, 1).n_t == 1


@pytest.mark.parametrize("args", [(10, 3, 0.1), (10, 1, 0.3), (0, 1, 0.1), (10, -1, 0.1)])
def test_build_grid_rejects(args):
    with pytest.raises(NonIntegerGrid):
        build_grid(*args)


def test_modes_sign_rules():
    g = build_grid(10, 1, 0.1)
    assert make_mode("drain", constant_rate(-1e-3), g).sign == -1
    assert make_mode("off", constant_rate(0.0), g).sign == 0
    assert make_mode("on", piecewise_linear_rate([[0, 0.01], [1, 0]]), g).sign == 1
    with pytest.raises(InvalidRate):
        make_mode("mixed", lambda s: s - 0.5, g)
    with pytest.raises(InvalidRate):
        make_mode("leaky", lambda s: np.full_like(s, 0.01), g)  # b(1) != 0
    with pytest.raises(InvalidRate):
        make_mode("neg", lambda s: np.full_like(s, -0.01), g)  # b(0) != 0
    with pytest.raises(InvalidRate):
        make_mode("bump", piecewise_linear_rate([[0, 0.0], [0.5, 0.01], [1, 0]]), g)


def test_constant_rate_boundary():
    r = constant_rate(-2.0)
    assert r(np.array([0.0, 0.5, 1.0])).tolist() == [0.0, -2.0, -2.0]


def test_incidence_and_pairs():
    assert mode_pairs(3) == [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]
    r = incidence(3)
    assert np.allclose(r.sum(axis=0), 0)
    assert r[0, 0] == -1 and r[1, 0] == 1


@given(st.integers(1, 6), st.integers(2, 4), st.integers(1, 7), st.data())
def test_layout_roundtrip(n_t, n_i, n_h, data):
    lay = VariableLayout(n_t, n_i, n_h)
    k = data.draw(st.integers(0, n_t))
    i = data.draw(st.integers(0, n_i - 1))
    l = data.draw(st.integers(0, n_h - 1))
    assert lay.decode(lay.m_index(k, i, l)) == ("m", k, i, l)
    kk = data.draw(st.integers(0, n_t - 1))
    p = data.draw(st.integers(0, lay.n_pairs - 1))
    assert lay.decode(lay.e_index(kk, p, l)) == ("e", kk, p, l)
    x = np.arange(lay.size, dtype=float)
    m, e = lay.unpack(x)
    assert np.array_equal(lay.pack(m, e), x)
    assert m[k, i, l] == lay.m_index(k, i, l)


def test_layout_bounds():
    lay = VariableLayout(2, 2, 3)
    with pytest.raises(IndexOutOfRange):
        lay.m_index(3, 0, 0)
    with pytest.raises(IndexOutOfRange):
        lay.e_index(2, 0, 0)
    with pytest.raises(IndexOutOfRange):
        lay.decode(lay.size)


def test_discretize_uniform():
    g = build_grid(18000, 450, 0.05)
    m0 = discretize_initial([uniform_density(0.2, 0.6), None], g)
    assert np.allclose(m0[0, 4:12], 2.5) and np.count_nonzero(m0[0]) == 8
    assert not m0[1].any()


def test_discretize_point_and_split():
    g = build_grid(1, 1, 0.1)
    m0 = discretize_initial([Histogram(np.array([0.0, 0.1]), np.array([10.0])), None], g)
    assert m0[0, 0] == pytest.approx(10.0)
    half = discretize_initial([uniform_density(0, 1, 0.5), lambda s: 0.5], g)
    assert np.allclose(half.sum(axis=1) * g.h, 0.5, atol=1e-10)
    with pytest.raises(NotNormalized):
        discretize_initial([uniform_density(0, 1, 0.5), None], g)


@given(st.floats(0.0, 0.8), st.floats(0.05, 0.2))
def test_discretize_preserves_mass(lo, width):
    g = build_grid(1, 1, 0.05)
    m0 = discretize_initial([uniform_density(lo, lo + width)], g)
    assert abs(m0.sum() * g.h - 1) < 1e-10


def test_total_mass():
    g = build_grid(1, 1, 0.05)
    m = np.zeros((2, 1, 20))
    m[0, 0, 3] = 2.5
    assert total_mass(m, 0, g.h) == pytest.approx(0.125)
    assert total_mass(m, 1, g.h) == 0.0
    with pytest.raises(IndexOutOfRange):
        total_mass(m, 2, g.h)


def test_ceil_cells():
    assert ceil_cells(0.7, 0.05) == 14
    assert ceil_cells(0.71, 0.05) == 15
    assert ceil_cells(0.6, 0.05) == 12
