"""Splitting scheme (mode transfers, then upwind transport in SoC) and its
linear constraint operator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .grid import Grid, Mode, ModeSet, ceil_cells, incidence, mode_pairs

TOL_POS = 1e-12


@dataclass(frozen=True)
class ConstraintSpec:
    """Mass bounds per step and mode, and the terminal minimum-SoC requirement.

    ``d_lower`` and ``d_upper`` have shape ``(n_t, n_modes)``; row ``k`` bounds
    the mode masses at ``t_k``, and the last row also bounds the terminal
    state. ``s_min = None`` disables the terminal requirement.
    """

    d_lower: np.ndarray
    d_upper: np.ndarray
    s_min: float | None = None
    epsilon: float = 0.0

    def __post_init__(self):
        lo, hi = np.asarray(self.d_lower, float), np.asarray(self.d_upper, float)
        if lo.shape != hi.shape or lo.ndim != 2:
            raise ValueError("d_lower and d_upper must share a (n_t, n_modes) shape")
        if np.any(lo < 0) or np.any(hi > 1) or np.any(lo > hi):
            raise ValueError("mass bounds must satisfy 0 <= d_lower <= d_upper <= 1")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.s_min is not None and not 0.0 < self.s_min < 1.0:
            raise ValueError("s_min must lie in (0, 1)")
        object.__setattr__(self, "d_lower", lo)
        object.__setattr__(self, "d_upper", hi)

    @classmethod
    def unconstrained(cls, n_t: int, n_modes: int) -> "ConstraintSpec":
        return cls(np.zeros((n_t, n_modes)), np.ones((n_t, n_modes)))

    def s_min_cells(self, h: float) -> int | None:
        """Last cell index counted as below ``s_min`` (inclusive)."""
        return None if self.s_min is None else ceil_cells(self.s_min, h)

    def bounds_at(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        k = min(k, self.d_lower.shape[0] - 1)
        return self.d_lower[k], self.d_upper[k]

    def step_bounds(self, n_steps: int) -> tuple[np.ndarray, np.ndarray]:
        """Bounds for time indices ``0..n_steps-1``, repeating the last row."""
        idx = np.minimum(np.arange(n_steps), self.d_lower.shape[0] - 1)
        return self.d_lower[idx], self.d_upper[idx]


# --------------------------------------------------------------------------
# scheme


def courant_numbers(mode: Mode, grid: Grid) -> np.ndarray:
    """``b(x_{l-1/2}) dt / h`` at the ``n_h + 1`` cell interfaces."""
    return mode.rate_at_half_points * grid.dt / grid.h


def check_cfl(grid: Grid, modes: ModeSet) -> float:
    """Largest Courant number over all modes; values above 1 are unstable."""
    if len(modes) == 0:
        return 0.0
    return max(m.max_rate for m in modes) * grid.dt / grid.h


def reaction_step(m_k: np.ndarray, e_k: np.ndarray, dt: float) -> np.ndarray:
    """Apply the mode transfers of one step.

    ``m_k`` has shape ``(n_modes, n_h)`` and ``e_k`` ``(n_pairs, n_h)``.
    """
    return m_k + dt * (incidence(m_k.shape[0]) @ e_k)


def advection_step(m_half: np.ndarray, mode: Mode, grid: Grid) -> np.ndarray:
    """Upwind transport of one mode's density along SoC.

    Zero ghost cells on both ends; the rate vanishes on the boundary the
    mass flows into, so the step is conservative.
    """
    nu = courant_numbers(mode, grid)
    m_half = np.asarray(m_half, dtype=float)
    flux = np.zeros(m_half.shape[:-1] + (grid.n_h + 1,))
    if mode.sign > 0:
        flux[..., 1:] = nu[1:] * m_half
    elif mode.sign < 0:
        flux[..., :-1] = nu[:-1] * m_half
    return m_half - (flux[..., 1:] - flux[..., :-1])


def advection_matrices(grid: Grid, modes: ModeSet) -> np.ndarray:
    """Dense per-mode advection matrices, shape ``(n_modes, n_h, n_h)``."""
    eye = np.eye(grid.n_h)
    # column c of A is the image of the unit vector e_c
    return np.stack([advection_step(eye, mode, grid).T for mode in modes])


def forward_rollout(m0: np.ndarray, e: np.ndarray, grid: Grid, modes: ModeSet) -> np.ndarray:
    """Density trajectory generated by the scheme from ``m0`` under flows ``e``."""
    n_modes = len(modes)
    m = np.empty((grid.n_t + 1, n_modes, grid.n_h))
    m[0] = m0
    for k in range(grid.n_t):
        half = reaction_step(m[k], e[k], grid.dt)
        for i, mode in enumerate(modes):
            m[k + 1, i] = advection_step(half[i], mode, grid)
    return m


# --------------------------------------------------------------------------
# constraint operator


@dataclass(frozen=True)
class DynamicsResidual:
    initial_block: np.ndarray  # (n_modes, n_h)
    evolution_block: np.ndarray  # (n_t, n_modes, n_h)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.initial_block[None], self.evolution_block])

    def max_abs(self) -> float:
        return float(max(np.max(np.abs(self.initial_block)), np.max(np.abs(self.evolution_block), initial=0.0)))


class DynamicsOperator:
    """The linear map ``C(m, e) = (m[0], m[k+1] - A (m[k] + dt R e[k]))``.

    A pair ``(m, e)`` follows the scheme from ``m0`` iff ``C(m, e) = (m0, 0)``.
    """

    def __init__(self, grid: Grid, modes: ModeSet):
        self.grid = grid
        self.n_modes = len(modes)
        self.adv = advection_matrices(grid, modes)
        self.inc = incidence(self.n_modes)
        self.pairs = mode_pairs(self.n_modes)

    def _advect(self, x):
        return np.einsum("iab,...ib->...ia", self.adv, x)

    def _advect_t(self, x):
        return np.einsum("iba,...ib->...ia", self.adv, x)

    def apply(self, m: np.ndarray, e: np.ndarray) -> np.ndarray:
        out = np.empty_like(m, dtype=float)
        out[0] = m[0]
        half = m[:-1] + self.grid.dt * np.einsum("ip,kpl->kil", self.inc, e)
        out[1:] = m[1:] - self._advect(half)
        return out

    def adjoint(self, lam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        back = self._advect_t(lam[1:])
        gm = np.array(lam, dtype=float, copy=True)
        gm[:-1] -= back
        ge = -self.grid.dt * np.einsum("ip,kil->kpl", self.inc, back)
        return gm, ge

    def target(self, m0: np.ndarray) -> np.ndarray:
        c = np.zeros((self.grid.n_t + 1, self.n_modes, self.grid.n_h))
        c[0] = m0
        return c

    def residual(self, m, e, m0) -> DynamicsResidual:
        r = self.apply(m, e)
        r[0] -= m0
        return DynamicsResidual(r[0], r[1:])

    def sparse(self, flow_scale: float = 1.0) -> sp.csr_matrix:
        """Matrix of the operator acting on ``(m, flow_scale * e)`` flattened."""
        g, n_i, n_h = self.grid, self.n_modes, self.grid.n_h
        n_p = len(self.pairs)
        adv = sp.block_diag([sp.csr_matrix(a) for a in self.adv], format="csr")
        inc = sp.kron(sp.csr_matrix(self.inc), sp.identity(n_h), format="csr")
        block_m = sp.identity(n_i * n_h, format="csr")
        rows_m = sp.kron(sp.identity(g.n_t + 1), block_m, format="csr")
        shift = sp.kron(sp.eye(g.n_t + 1, g.n_t + 1, k=-1), adv, format="csr")
        c_m = rows_m - shift
        c_e_block = -(g.dt / flow_scale) * (adv @ inc)
        c_e = sp.kron(sp.eye(g.n_t + 1, g.n_t, k=-1), c_e_block, format="csr")
        assert c_e.shape == ((g.n_t + 1) * n_i * n_h, g.n_t * n_p * n_h)
        return sp.hstack([c_m, c_e], format="csr")


def apply_constraint_operator(m, e, m0, grid: Grid, modes: ModeSet) -> DynamicsResidual:
    """``C(m, e) - (m0, 0)``; zero iff ``(m, e)`` is a scheme trajectory from ``m0``."""
    return DynamicsOperator(grid, modes).residual(m, e, m0)


def apply_adjoint(lam, grid: Grid, modes: ModeSet) -> tuple[np.ndarray, np.ndarray]:
    return DynamicsOperator(grid, modes).adjoint(lam)


# --------------------------------------------------------------------------
# inequality constraints


@dataclass(frozen=True)
class FeasibilityReport:
    """Largest violation of each inequality constraint (0 when satisfied)."""

    transfer_capacity: float  # dt * sum_j E_ij <= m_i, per cell
    flow_sign: float  # E >= 0
    mass_lower: float
    mass_upper: float
    terminal_soc: float
    dynamics: float = 0.0

    @property
    def worst(self) -> float:
        return max(self.transfer_capacity, self.flow_sign, self.mass_lower, self.mass_upper,
                   self.terminal_soc, self.dynamics)

    def as_dict(self) -> dict:
        return {
            "transfer_capacity": self.transfer_capacity,
            "flow_sign": self.flow_sign,
            "mass_lower": self.mass_lower,
            "mass_upper": self.mass_upper,
            "terminal_soc": self.terminal_soc,
            "dynamics": self.dynamics,
        }


def terminal_low_mass(m_final: np.ndarray, spec: ConstraintSpec, h: float) -> float:
    """Mass in cells ``0..s_min_cells`` at the final time, summed over modes."""
    cells = spec.s_min_cells(h)
    if cells is None:
        return 0.0
    return float(np.sum(m_final[:, : cells + 1]) * h)


def feasibility_report(m, e, spec: ConstraintSpec, grid: Grid, m0=None, modes: ModeSet | None = None
                       ) -> FeasibilityReport:
    n_modes = m.shape[1]
    pairs = mode_pairs(n_modes)
    out_flow = np.zeros((grid.n_t, n_modes, grid.n_h))
    for p, (i, _) in enumerate(pairs):
        out_flow[:, i] += e[:, p]
    capacity = float(np.max(grid.dt * out_flow - m[:-1], initial=0.0))
    sign = float(np.max(-e, initial=0.0))
    mass = np.sum(m, axis=-1) * grid.h
    lo, hi = spec.step_bounds(grid.n_t + 1)
    lower = float(np.max(lo - mass, initial=0.0))
    upper = float(np.max(mass - hi, initial=0.0))
    terminal = 0.0
    if spec.s_min is not None:
        terminal = max(0.0, terminal_low_mass(m[-1], spec, grid.h) - spec.epsilon)
    dyn = 0.0
    if m0 is not None and modes is not None:
        dyn = apply_constraint_operator(m, e, m0, grid, modes).max_abs()
    return FeasibilityReport(max(capacity, 0.0), max(sign, 0.0), max(lower, 0.0), max(upper, 0.0),
                             terminal, dyn)
