"""Chambolle-Pock primal-dual solver for the discretized control problem.

The problem ``min J(m, E)`` subject to the scheme, the transfer capacity,
the mass bounds and the terminal SoC requirement is written as

    min_y  G(y) + F_dyn(y) + sum_r F_r(s * M_r y)

with ``y = (m, dt * E)``. ``G`` gathers every per-cell term (switching
costs, electricity cost, transfer capacity, terminal cost) and has an exact
prox. ``F_dyn`` is the indicator of the scheme's affine set, whose conjugate
prox comes from an exact projection (conjugate gradient on the normal
equations). The rows ``M_r`` are mode-mass sums carrying the interval
bounds, the terminal-SoC bound and the tracking penalty; ``s`` rescales them
so that ``gamma * tau * ||K||**2 < 1`` holds for the stacked operator
``K = [I; s M]``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import stats
from scipy.sparse import linalg as spla

from . import costs as C
from .dynamics import ConstraintSpec, DynamicsOperator, check_cfl, forward_rollout
from .errors import CflViolation, InvalidStepSize, LinearSolveStagnation, PremiseUnmet
from .grid import Grid, ModeSet, VariableLayout, ceil_cells, layout_for, mode_pairs

log = logging.getLogger(__name__)

TOL_DIV = 1e-9
OPNORM_SAFETY = 1.01


@dataclass(frozen=True)
class CpParams:
    theta_relax: float = 0.5
    tau: float = 1.8
    gamma: float = 0.5
    max_iter: int = 12000
    tol_primal: float = 1e-7
    tol_dual: float = 1e-6
    cg_tol: float = 1e-10
    cg_maxiter: int = 2000

    def __post_init__(self):
        if not 0.0 <= self.theta_relax <= 1.0:
            raise InvalidStepSize("theta_relax must lie in [0, 1]")
        if self.tau <= 0 or self.gamma <= 0:
            raise InvalidStepSize("tau and gamma must be positive")
        if self.gamma * self.tau >= 1.0:
            raise InvalidStepSize(f"gamma * tau = {self.gamma * self.tau} must be < 1")
        if self.max_iter < 0:
            raise InvalidStepSize("max_iter must be nonnegative")


# --------------------------------------------------------------------------
# linear algebra helpers


def conjugate_gradient(matvec, b, x0=None, tol=1e-10, maxiter=2000, precond=None):
    """Preconditioned CG for a symmetric positive definite system.

    Stops when ``||b - A x|| <= tol * max(1, ||b||)``. Raises
    :class:`LinearSolveStagnation` if that is not reached within ``maxiter``
    iterations or the residual stops decreasing.
    """
    x = np.zeros_like(b) if x0 is None else x0.copy()
    r = b - matvec(x)
    target = tol * max(1.0, float(np.linalg.norm(b)))
    rnorm = float(np.linalg.norm(r))
    if rnorm <= target:
        return x, 0
    z = r if precond is None else precond(r)
    p = z.copy()
    rz = float(r @ z)
    best, since_best = rnorm, 0
    for it in range(1, maxiter + 1):
        ap = matvec(p)
        alpha = rz / float(p @ ap)
        x += alpha * p
        r -= alpha * ap
        rnorm = float(np.linalg.norm(r))
        if rnorm <= target:
            return x, it
        if rnorm < 0.5 * best:
            best, since_best = rnorm, 0
        else:
            since_best += 1
            if since_best > 200:
                raise LinearSolveStagnation(f"CG residual stalled at {rnorm:.3e}", it)
        z = r if precond is None else precond(r)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise LinearSolveStagnation(f"CG residual {rnorm:.3e} above {target:.3e}", maxiter)


def power_iteration(matvec, n, iters=100, seed=0):
    """Largest eigenvalue of a symmetric PSD operator, with the last relative change."""
    v = np.random.default_rng(seed).standard_normal(n)
    v /= np.linalg.norm(v)
    lam, change = 0.0, np.inf
    for _ in range(iters):
        w = matvec(v)
        new = float(v @ w)
        change = abs(new - lam) / max(abs(new), 1e-300)
        lam = new
        v = w / np.linalg.norm(w)
    return lam, change


# --------------------------------------------------------------------------
# problem assembly


@dataclass
class MassRows:
    """Mode-mass sums ``h * sum_l m`` over selected cells, with their convex terms.

    ``kind[r]`` is 0 for an interval indicator ``[lo, hi]`` and 1 for a
    quadratic penalty ``weight * (z - target)**2`` (one-sided when flagged).
    """

    matrix: sp.csr_matrix
    kind: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    weight: np.ndarray
    target: np.ndarray
    one_sided: np.ndarray
    labels: list

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


@dataclass
class SaddlePointProblem:
    grid: Grid
    modes: ModeSet
    layout: VariableLayout
    constraints: ConstraintSpec
    costs: C.CostSpec
    m0: np.ndarray
    flow_scale: float
    dyn: DynamicsOperator
    c_matrix: sp.csr_matrix
    c_target: np.ndarray
    normal_matrix: sp.csr_matrix
    normal_precond: object  # callable r -> approx (C C^T)^{-1} r
    # per source mode: pair indices and scaled switching weights
    out_pairs: list
    theta: list
    theta_tilde: list
    linear: np.ndarray  # (n_t, n_modes) electricity cost per unit density
    ratio: float
    rows: MassRows
    row_scale: float
    opnorm: float
    opnorm_change: float
    objective_scale: float = 1.0  # the iteration minimizes J / objective_scale

    # -- coordinates ---------------------------------------------------------

    def pack(self, m, e):
        return self.layout.pack(m, self.flow_scale * np.asarray(e))

    def unpack(self, y):
        m, f = self.layout.unpack(y)
        return m, f / self.flow_scale

    # -- operators -----------------------------------------------------------

    def k_apply(self, y):
        return y, self.row_scale * (self.rows.matrix @ y)

    def k_adjoint(self, s_dyn, s_rows):
        return s_dyn + self.row_scale * (self.rows.matrix.T @ s_rows)

    def project_dynamics(self, x, lam0=None, tol=1e-10, maxiter=2000):
        """Euclidean projection (in ``y`` coordinates) onto the scheme's affine set.

        Returns the projection and the normal-equation multipliers, which
        warm-start the next call.
        """
        rhs = self.c_matrix @ x - self.c_target
        lam, _ = conjugate_gradient(lambda v: self.normal_matrix @ v, rhs, lam0, tol, maxiter,
                                    self.normal_precond)
        return x - self.c_matrix.T @ lam, lam

    def prox_primal(self, x, tau):
        """Exact prox of ``tau * G``."""
        g, lay = self.grid, self.layout
        tau = tau / self.objective_scale
        m, f = lay.unpack(x)
        m_out, f_out = m.copy(), f.copy()
        for i in range(lay.n_modes):
            ps = self.out_pairs[i]
            a0 = m[: g.n_t, i].ravel()
            b0 = f[:, ps].transpose(1, 0, 2).reshape(len(ps), -1)
            lin = np.repeat(self.linear[:, i], g.n_h)
            a, b = C.prox_transfer_cell(a0, b0, tau, self.theta[i], self.theta_tilde[i], lin, self.ratio)
            m_out[: g.n_t, i] = a.reshape(g.n_t, g.n_h)
            f_out[:, ps] = b.reshape(len(ps), g.n_t, g.n_h).transpose(1, 0, 2)
        term = self.costs.terminal
        if term is not None:
            m_out[-1] = C.prox_terminal(m[-1], tau, term.weights, term.target, g.h)
        return lay.pack(m_out, f_out)

    def prox_rows_conjugate(self, v, gamma):
        """``prox_{gamma F_r*}`` for the scaled row terms, via Moreau."""
        s, rw = self.row_scale, self.rows
        x = v / gamma
        # prox of F_r / gamma at x, with F_r(z) = f_r(z / s)
        z = x / s
        mu = 1.0 / (gamma * s * s)
        p = np.clip(z, rw.lo, rw.hi)
        quad = rw.kind == 1
        if quad.any():
            c = rw.weight[quad] / self.objective_scale
            pq = (z[quad] + 2 * mu * c * rw.target[quad]) / (1 + 2 * mu * c)
            pq = np.where(rw.one_sided[quad] & (z[quad] <= rw.target[quad]), z[quad], pq)
            p[quad] = pq
        return v - gamma * s * p

    # -- evaluation ----------------------------------------------------------

    def objective(self, m, e) -> float:
        return C.total_objective(m, e, self.costs, self.grid, self.modes)

    def row_violation(self, y) -> float:
        z = self.rows.matrix @ y
        inter = self.rows.kind == 0
        if not inter.any():
            return 0.0
        zi = z[inter]
        return float(np.max(np.maximum(self.rows.lo[inter] - zi, 0.0) + np.maximum(zi - self.rows.hi[inter], 0.0)))

    def max_violation(self, y) -> float:
        """Worst violation of the scheme, transfer capacity, mass bounds and terminal SoC."""
        dyn = float(np.max(np.abs(self.c_matrix @ y - self.c_target)))
        m, f = self.layout.unpack(y)
        cap = 0.0
        for i, ps in enumerate(self.out_pairs):
            cap = max(cap, float(np.max(self.ratio * f[:, ps].sum(axis=1) - m[: self.grid.n_t, i], initial=0.0)))
        neg = float(np.max(-f, initial=0.0))
        return max(dyn, cap, neg, self.row_violation(y))

    def evaluate(self, m, e) -> float:
        """Objective plus the indicators of every constraint (``inf`` if any fails)."""
        y = self.pack(m, e)
        if np.max(np.abs(self.c_matrix @ y - self.c_target)) > 1e-9:
            return np.inf
        m_, f = self.layout.unpack(y)
        for i, ps in enumerate(self.out_pairs):
            if np.any(self.ratio * f[:, ps].sum(axis=1) > m_[: self.grid.n_t, i] + 1e-12):
                return np.inf
        if np.any(f < 0) or self.row_violation(y) > 1e-12:
            return np.inf
        return self.objective(m, e)


def _mass_rows(grid: Grid, layout: VariableLayout, constraints: ConstraintSpec, costs: C.CostSpec) -> MassRows:
    entries = []  # (cells as flat indices, kind, lo, hi, weight, target, one_sided, label)
    lo_b, hi_b = constraints.step_bounds(grid.n_t + 1)
    for k in range(grid.n_t + 1):
        for i in range(layout.n_modes):
            lo, hi = lo_b[k, i], hi_b[k, i]
            if lo <= 0 and hi >= 1:
                continue
            cells = [layout.m_index(k, i, l) for l in range(grid.n_h)]
            entries.append((cells, 0, lo, hi, 0.0, 0.0, False, f"mass[k={k},i={i}]"))
    sh = constraints.s_min_cells(grid.h)
    if sh is not None:
        cells = [layout.m_index(grid.n_t, i, l) for i in range(layout.n_modes) for l in range(min(sh + 1, grid.n_h))]
        entries.append((cells, 0, -np.inf, constraints.epsilon, 0.0, 0.0, False, "terminal_soc"))
    tr = costs.tracking
    if tr is not None:
        for k in range(grid.n_t):
            cells = [layout.m_index(k, tr.mode, l) for l in range(grid.n_h)]
            entries.append((cells, 1, -np.inf, np.inf, float(tr.weights[k]) * grid.dt, float(tr.target[k]),
                            tr.one_sided, f"tracking[k={k}]"))
    rows, cols = [], []
    for r, ent in enumerate(entries):
        rows += [r] * len(ent[0])
        cols += ent[0]
    mat = sp.csr_matrix((np.full(len(rows), grid.h), (rows, cols)), shape=(len(entries), layout.size))
    col = lambda q, dt=float: np.array([ent[q] for ent in entries], dtype=dt)  # noqa: E731
    return MassRows(mat, col(1, int), col(2), col(3), col(4), col(5), col(6, bool), [ent[7] for ent in entries])


def smooth_gradient(problem: SaddlePointProblem, y: np.ndarray) -> np.ndarray:
    """Gradient of the differentiable cost terms at ``y`` (switching costs at their linear rate)."""
    g, lay = problem.grid, problem.layout
    m, _ = lay.unpack(y)
    gm = np.zeros(lay.m_shape)
    gm[: g.n_t] += problem.linear[:, :, None]
    tr = problem.costs.tracking
    if tr is not None:
        occ = m[: g.n_t, tr.mode].sum(axis=-1) * g.h
        gm[: g.n_t, tr.mode] += (2 * tr.weights * g.dt * g.h * (occ - tr.target))[:, None]
    term = problem.costs.terminal
    if term is not None:
        gm[-1] += 2 * term.weights * g.h * (m[-1] - term.target)
    ge = np.zeros(lay.e_shape)
    for i, ps in enumerate(problem.out_pairs):
        ge[:, ps] = problem.theta[i][None, :, None]
    return lay.pack(gm, ge)


def auto_objective_scale(problem: SaddlePointProblem, y0: np.ndarray) -> float:
    """``max(1, ||grad J(y0)|| / ||y0||)``: brings the duals to the size of the primal iterate."""
    ny = float(np.linalg.norm(y0))
    return max(1.0, float(np.linalg.norm(smooth_gradient(problem, y0))) / ny) if ny > 0 else 1.0


def build_saddle_problem(scenario, params: CpParams | None = None,
                         objective_scale: float | str = "auto") -> SaddlePointProblem:
    """Assemble the primal-dual splitting for a :class:`~mfcharge.scenarios.Scenario`.

    The iteration minimizes ``J / objective_scale`` (same minimizer). With
    ``"auto"`` the scale is chosen from the cost gradient at the initial
    point; see :func:`auto_objective_scale`.
    """
    params = params or scenario.solver_params
    grid, modes = scenario.grid, scenario.modes
    cfl = check_cfl(grid, modes)
    if cfl > 1.0:
        raise CflViolation(f"Courant number {cfl:.4g} exceeds 1")
    n_modes = len(modes)
    if n_modes < 2:
        raise ValueError("at least two modes are required")
    layout = layout_for(grid, n_modes)
    pairs = mode_pairs(n_modes)
    s = grid.dt  # solve for transferred mass per step instead of a rate
    dyn = DynamicsOperator(grid, modes)
    cmat = dyn.sparse(flow_scale=s)
    normal = (cmat @ cmat.T).tocsr()
    out_pairs, theta, theta_tilde = [], [], []
    for i in range(n_modes):
        ps = [p for p, (a, _) in enumerate(pairs) if a == i]
        out_pairs.append(ps)
        prm = [scenario.costs.switching.get(pairs[p], C.PerspectiveParams(0.0, 0.0)) for p in ps]
        theta.append(np.array([q.theta * grid.h * grid.dt / s for q in prm]))
        theta_tilde.append(np.array([q.theta_tilde * grid.h * grid.dt / s**2 for q in prm]))
    linear = np.zeros((grid.n_t, n_modes))
    if scenario.costs.energy is not None:
        prices = np.asarray(scenario.costs.energy.prices, dtype=float)
        linear = np.outer(prices, modes.power_kw) * grid.h * grid.dt / C.SECONDS_PER_HOUR
    rows = _mass_rows(grid, layout, scenario.constraints, scenario.costs)

    gt = params.gamma * params.tau
    row_norm = 0.0
    if rows.n:
        row_norm = np.sqrt(power_iteration(lambda v: rows.matrix.T @ (rows.matrix @ v), layout.size)[0])
    room = (1.0 - gt) / (2.0 * gt)
    row_scale = min(np.sqrt(room), 1.0) / row_norm if row_norm > 0 else 1.0

    def ktk(v):
        return v + row_scale**2 * (rows.matrix.T @ (rows.matrix @ v))

    lam, change = power_iteration(ktk, layout.size)
    lam *= OPNORM_SAFETY  # power iteration approaches the top eigenvalue from below
    opnorm = float(np.sqrt(lam))
    if gt * lam >= 1.0:
        raise InvalidStepSize(f"gamma * tau * ||K||^2 = {gt * lam:.4f} is not below 1")

    m0 = np.asarray(scenario.initial, dtype=float)
    problem = SaddlePointProblem(
        grid=grid, modes=modes, layout=layout, constraints=scenario.constraints, costs=scenario.costs,
        m0=m0, flow_scale=s, dyn=dyn, c_matrix=cmat, c_target=dyn.target(m0).ravel(),
        normal_matrix=normal, normal_precond=spla.splu(normal.tocsc()).solve,
        out_pairs=out_pairs, theta=theta, theta_tilde=theta_tilde, linear=linear, ratio=grid.dt / s,
        rows=rows, row_scale=row_scale, opnorm=opnorm, opnorm_change=change,
    )
    if objective_scale == "auto":
        problem.objective_scale = auto_objective_scale(problem, initial_state(problem).y)
    else:
        problem.objective_scale = float(objective_scale)
    return problem


# --------------------------------------------------------------------------
# iteration


@dataclass
class CpState:
    y: np.ndarray
    y_bar: np.ndarray
    sigma_dyn: np.ndarray
    sigma_rows: np.ndarray
    lam: np.ndarray | None = None  # warm start of the normal equations

    def copy(self) -> "CpState":
        return CpState(self.y.copy(), self.y_bar.copy(), self.sigma_dyn.copy(), self.sigma_rows.copy(),
                       None if self.lam is None else self.lam.copy())


def initial_state(problem: SaddlePointProblem) -> CpState:
    """Scheme trajectory with no transfers; zero duals."""
    g = problem.grid
    e = np.zeros(problem.layout.e_shape)
    m = forward_rollout(problem.m0, e, g, problem.modes)
    y = problem.pack(m, e)
    return CpState(y, y.copy(), np.zeros_like(y), np.zeros(problem.rows.n))


def cp_iterate(state: CpState, problem: SaddlePointProblem, params: CpParams) -> CpState:
    """One Chambolle-Pock step: dual prox, primal prox, over-relaxation."""
    gamma, tau = params.gamma, params.tau
    kd, kr = problem.k_apply(state.y_bar)
    # dual update; prox of the dynamics conjugate is gamma * C^T lambda
    v = state.sigma_dyn + gamma * kd
    _, lam = problem.project_dynamics(v / gamma, state.lam, params.cg_tol, params.cg_maxiter)
    sigma_dyn = gamma * (problem.c_matrix.T @ lam)
    sigma_rows = problem.prox_rows_conjugate(state.sigma_rows + gamma * kr, gamma) if problem.rows.n else state.sigma_rows
    y = problem.prox_primal(state.y - tau * problem.k_adjoint(sigma_dyn, sigma_rows), tau)
    y_bar = y + params.theta_relax * (y - state.y)
    return CpState(y, y_bar, sigma_dyn, sigma_rows, lam)


@dataclass
class SolveDiagnostics:
    objective: list = field(default_factory=list)
    max_violation: list = field(default_factory=list)
    primal_residual: list = field(default_factory=list)
    dual_residual: list = field(default_factory=list)
    iterations: int = 0
    wall_time: float = 0.0
    converged: bool = False

    def append(self, obj, viol, pres, dres):
        self.objective.append(obj)
        self.max_violation.append(viol)
        self.primal_residual.append(pres)
        self.dual_residual.append(dres)

    def rows(self):
        for it, vals in enumerate(zip(self.objective, self.max_violation, self.primal_residual, self.dual_residual), 1):
            yield (it,) + vals


@dataclass
class SolveResult:
    m: np.ndarray
    e: np.ndarray
    diagnostics: SolveDiagnostics
    state: CpState


def solve(problem: SaddlePointProblem, params: CpParams, state: CpState | None = None,
          callback=None, log_every: int = 1000) -> SolveResult:
    """Run Chambolle-Pock until both residual tests pass or ``max_iter``.

    Non-convergence is reported in the diagnostics, never raised.
    """
    state = initial_state(problem) if state is None else state
    diag = SolveDiagnostics()
    start = time.perf_counter()
    for it in range(1, params.max_iter + 1):
        new = cp_iterate(state, problem, params)
        pres = float(np.linalg.norm(new.y - state.y)) / max(1.0, float(np.linalg.norm(state.y)))
        dres = float(np.sqrt(np.sum((new.sigma_dyn - state.sigma_dyn) ** 2) + np.sum((new.sigma_rows - state.sigma_rows) ** 2)))
        dres /= max(1.0, float(np.sqrt(np.sum(state.sigma_dyn**2) + np.sum(state.sigma_rows**2))))
        state = new
        m, e = problem.unpack(state.y)
        viol = problem.max_violation(state.y)
        diag.append(problem.objective(m, e), viol, pres, dres)
        if callback is not None:
            callback(it, state, diag)
        if log_every and it % log_every == 0:
            log.info("iter %d  J=%.6g  viol=%.3e  dy=%.3e", it, diag.objective[-1], viol, pres)
        if pres <= params.tol_primal and viol <= params.tol_dual:
            diag.converged = True
            break
    diag.iterations = len(diag.objective)
    diag.wall_time = time.perf_counter() - start
    m, e = problem.unpack(state.y)
    return SolveResult(m, e, diag, state)


# --------------------------------------------------------------------------
# post-processing


def extract_alpha(m, e, tol_div: float = TOL_DIV) -> np.ndarray:
    """Transition intensities ``E_ij / m_i``, zero where ``m_i <= tol_div``."""
    n_t = e.shape[0]
    src = np.array([i for i, _ in mode_pairs(m.shape[1])])
    dens = m[:n_t][:, src]
    out = np.zeros_like(e, dtype=float)
    ok = dens > tol_div
    out[ok] = e[ok] / dens[ok]
    return out


# --------------------------------------------------------------------------
# Slater sufficient condition


@dataclass(frozen=True)
class SlaterCertificate:
    verified: bool
    mode: int | None  # charging mode j used in the bound
    idle_mode: int | None  # zero-rate mode i0
    p: float
    rho: int
    tau: int
    mu: float
    epsilon_gap: float  # epsilon - e
    unmet: tuple = ()

    def as_dict(self) -> dict:
        return {"verified": self.verified, "mode": self.mode, "idle_mode": self.idle_mode, "p": self.p,
                "rho": self.rho, "tau": self.tau, "mu": self.mu, "epsilon_minus_e": self.epsilon_gap,
                "unmet": list(self.unmet)}


def binomial_lower_tail(n: int, p: float, s: int) -> float:
    """``sum_{k=0}^{s} C(n, k) p**k (1 - p)**(n - k)``."""
    if s >= n:
        return 1.0
    if s < 0:
        return 0.0
    return float(stats.binom.cdf(s, n, p))


def slater_certificate(scenario, e_margin: float) -> SlaterCertificate:
    """Evaluate the binomial sufficient condition for strong duality.

    Unmet structural premises are listed in ``unmet`` (and force
    ``verified=False``); :class:`PremiseUnmet` is raised only when no
    charging mode admits the bound at all.
    """
    grid, modes, cons = scenario.grid, scenario.modes, scenario.constraints
    if cons.s_min is None:
        raise PremiseUnmet("the scenario has no terminal minimum-SoC constraint")
    d_low = cons.d_lower.max(axis=0)
    d_up = cons.d_upper.min(axis=0)
    unmet = []
    if np.any(d_low > 0):
        unmet.append("some mode has a positive lower mass bound")
    idle = [i for i, md in enumerate(modes) if md.sign == 0 and d_up[i] >= 1.0]
    if not idle:
        unmet.append("no zero-rate mode with upper mass bound 1")
    sh = ceil_cells(cons.s_min, grid.h)
    best = None
    for j, md in enumerate(modes):
        if md.sign <= 0 or not 0.0 < e_margin < d_up[j]:
            continue
        p = float(grid.dt / grid.h * md.rate(np.array([cons.s_min]))[0])
        rho = int(np.ceil(1.0 / (d_up[j] - e_margin) - 1e-12))
        tau_j = grid.n_t // rho
        mu = binomial_lower_tail(tau_j, p, sh)
        if best is None or mu < best[4]:
            best = (j, p, rho, tau_j, mu)
    if best is None:
        raise PremiseUnmet(f"no charging mode j with 0 < e={e_margin} < inf_t D_upper_j")
    j, p, rho, tau_j, mu = best
    gap = cons.epsilon - e_margin
    verified = not unmet and mu < gap
    return SlaterCertificate(verified, j, idle[0] if idle else None, p, rho, tau_j, mu, gap, tuple(unmet))
