"""Convex cost terms, their proximal maps and the assembled objective.

Every prox here solves ``argmin_z 0.5 * ||z - x||^2 + tau * f(z)`` exactly
(closed form or a scalar monotone root-find). The ``*_conjugate`` proxes are
computed independently from the primal ones, so the Moreau identity
``prox_{tau f}(x) + tau * prox_{f*/tau}(x / tau) = x`` is a genuine check.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NoConvergence
from .grid import Grid, ModeSet, mode_pairs

SECONDS_PER_HOUR = 3600.0
ROOT_MAXITER = 200
ROOT_TOL = 1e-12


@dataclass(frozen=True)
class PerspectiveParams:
    """Switching penalty ``theta * b + theta_tilde * b**2 / a``."""

    theta: float
    theta_tilde: float

    def __post_init__(self):
        if self.theta < 0 or self.theta_tilde < 0:
            raise ValueError("switching weights must be nonnegative")

    def scaled(self, linear: float, quadratic: float) -> "PerspectiveParams":
        return PerspectiveParams(self.theta * linear, self.theta_tilde * quadratic)


# --------------------------------------------------------------------------
# perspective switching cost


def perspective_cost(a, b, params: PerspectiveParams):
    """Elementwise switching cost; ``inf`` outside the domain."""
    a, b = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    out = np.full(a.shape, np.inf)
    inside = (a > 0) & (b >= 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out[inside] = params.theta * b[inside] + params.theta_tilde * b[inside] ** 2 / a[inside]
    out[(a == 0) & (b == 0)] = 0.0
    if params.theta_tilde == 0:
        # lower semicontinuous closure of the linear cost
        edge = (a == 0) & (b > 0)
        out[edge] = params.theta * b[edge]
    return out[()] if out.ndim == 0 else out


def _newton_increasing(g, dg, lo, hi, active):
    """Root of increasing ``g`` on brackets ``[lo, hi]`` (``g(lo) <= 0 <= g(hi)``).

    Newton from ``hi`` with a bisection fallback whenever a step leaves the
    bracket. Only entries flagged ``active`` are iterated.
    """
    x = hi.copy()
    todo = active.copy()
    for _ in range(ROOT_MAXITER):
        if not todo.any():
            return x
        gx = g(x[todo], todo)
        step = gx / dg(x[todo], todo)
        xt, lt, ht = x[todo], lo[todo], hi[todo]
        pos = gx > 0
        ht = np.where(pos, xt, ht)
        lt = np.where(pos, lt, xt)
        cand = xt - step
        bad = ~np.isfinite(cand) | (cand <= lt) | (cand >= ht)
        cand = np.where(bad, 0.5 * (lt + ht), cand)
        done = (np.abs(cand - xt) <= ROOT_TOL * np.maximum(1.0, np.abs(xt))) | (gx == 0)
        lo[todo], hi[todo], x[todo] = lt, ht, cand
        idx = np.flatnonzero(todo)
        todo[idx[done]] = False
    raise NoConvergence(f"scalar root-find exceeded {ROOT_MAXITER} iterations")


def prox_perspective(a0, b0, tau: float, params: PerspectiveParams):
    """Joint prox of the switching cost at ``(a0, b0)``.

    With ``b`` eliminated through ``b = b0' a / (a + 2 tau theta_tilde)`` the
    optimality system reduces to the cubic
    ``(a - a0) (a + 2 kappa)**2 = kappa b0'**2`` with ``kappa = tau theta_tilde``
    and ``b0' = b0 - tau theta``, whose root is found by safeguarded Newton.
    """
    a0, b0 = np.broadcast_arrays(np.asarray(a0, dtype=float), np.asarray(b0, dtype=float))
    shape = a0.shape
    a0, b0 = a0.ravel().copy(), b0.ravel().copy()
    bs = b0 - tau * params.theta
    kappa = tau * params.theta_tilde
    a = np.maximum(a0, 0.0)
    b = np.zeros_like(a0)
    if kappa == 0.0:
        b = np.maximum(bs, 0.0)
        return a.reshape(shape), b.reshape(shape)

    moving = bs > 0
    vertex = moving & (a0 <= -bs**2 / (4.0 * kappa))
    a[vertex] = 0.0
    solve = moving & ~vertex
    if solve.any():
        rhs = kappa * bs**2
        lo = np.maximum(a0, 0.0)
        hi = lo + np.cbrt(rhs) + 1e-300

        def g(x, m):
            return (x - a0[m]) * (x + 2 * kappa) ** 2 - rhs[m]

        def dg(x, m):
            return (x + 2 * kappa) * (3 * x + 2 * kappa - 2 * a0[m])

        root = _newton_increasing(g, dg, lo, hi, solve)
        a[solve] = root[solve]
        b[solve] = bs[solve] * a[solve] / (a[solve] + 2 * kappa)
    return a.reshape(shape), b.reshape(shape)


def project_perspective_dual(u0, v0, params: PerspectiveParams):
    """Projection onto ``{(u, v): u + max(v - theta, 0)**2 / (4 theta_tilde) <= 0}``.

    That set is the domain of the conjugate of the switching cost, so this is
    ``prox`` of the conjugate for any step size.
    """
    u0, v0 = np.broadcast_arrays(np.asarray(u0, dtype=float), np.asarray(v0, dtype=float))
    shape = u0.shape
    u0, v0 = u0.ravel().copy(), v0.ravel().copy()
    th, tt = params.theta, params.theta_tilde
    if tt == 0.0:
        return np.minimum(u0, 0.0).reshape(shape), np.minimum(v0, th).reshape(shape)
    u, v = u0.copy(), v0.copy()
    w0 = np.maximum(v0 - th, 0.0)
    outside = u0 + w0**2 / (4 * tt) > 0
    flat = outside & (v0 <= th)
    u[flat] = 0.0
    curved = outside & ~flat
    if curved.any():
        # positive root of w**3 + (8 tt**2 + 4 tt u0) w - 8 tt**2 w0 on [0, w0]
        lo, hi = np.zeros_like(u0), w0.copy()
        w = 0.5 * (lo + hi)
        for _ in range(ROOT_MAXITER):
            f = w**3 + (8 * tt**2 + 4 * tt * u0) * w - 8 * tt**2 * w0
            hi = np.where(f > 0, w, hi)
            lo = np.where(f > 0, lo, w)
            w_new = 0.5 * (lo + hi)
            if np.all(np.abs(w_new - w)[curved] <= 1e-15 * np.maximum(1.0, w0[curved])):
                w = w_new
                break
            w = w_new
        u[curved] = -w[curved] ** 2 / (4 * tt)
        v[curved] = th + w[curved]
    return u.reshape(shape), v.reshape(shape)


def prox_perspective_conjugate(u0, v0, tau, params):
    """Prox of the conjugate (an indicator): the projection, whatever ``tau``."""
    return project_perspective_dual(u0, v0, params)


# --------------------------------------------------------------------------
# per-cell transfer prox (switching costs + transfer capacity)


def _capped_flows(bs, d, a, ratio):
    """Flows ``max(0, (bs - u) / d)`` with the smallest ``u >= 0`` meeting the cap.

    The cap is ``ratio * sum_j flow_j <= a``. Arrays have shape ``(J, N)``.
    """
    flows = np.maximum(bs, 0.0) / d
    u = np.zeros(a.shape)
    over = ratio * flows.sum(axis=0) > a
    if over.any():
        order = np.argsort(-bs[:, over], axis=0)
        c = np.take_along_axis(bs[:, over], order, axis=0)
        w = np.take_along_axis(1.0 / d[:, over], order, axis=0)
        cw, ww = np.cumsum(c * w, axis=0), np.cumsum(w, axis=0)
        target = a[over] / ratio
        cand = (cw - target) / ww
        nxt = np.vstack([c[1:], np.full((1, c.shape[1]), -np.inf)])
        valid = (cand >= nxt - 1e-300) & (cand <= c + 1e-300)
        q = np.argmax(valid, axis=0)
        u_over = np.maximum(cand[q, np.arange(c.shape[1])], 0.0)
        u[over] = u_over
        flows[:, over] = np.maximum(bs[:, over] - u_over, 0.0) / d[:, over]
    return flows, u


def prox_transfer_cell(a0, b0, tau, theta, theta_tilde, linear=0.0, ratio=1.0):
    """Prox of one source cell: switching costs plus ``ratio * sum(b) <= a``.

    Minimizes ``0.5 (a - a0)**2 + 0.5 ||b - b0||**2 + tau * (linear * a +
    sum_j theta_j b_j + theta_tilde_j b_j**2 / a)`` over ``b >= 0`` and
    ``ratio * sum_j b_j <= a``. ``b0`` has shape ``(J, N)``; ``theta`` and
    ``theta_tilde`` are length ``J``.
    """
    a0 = np.asarray(a0, dtype=float) - tau * np.asarray(linear, dtype=float)
    b0 = np.asarray(b0, dtype=float)
    theta = np.asarray(theta, dtype=float).reshape(-1, 1)
    theta_tilde = np.asarray(theta_tilde, dtype=float).reshape(-1, 1)
    if b0.shape[0] == 1:
        return _prox_transfer_single(a0, b0[0], tau, float(theta[0, 0]), float(theta_tilde[0, 0]), ratio)
    return _prox_transfer_general(a0, b0, tau, theta, theta_tilde, ratio)


def _prox_transfer_single(a0, b0, tau, theta, theta_tilde, ratio):
    a, b = prox_perspective(a0, b0, tau, PerspectiveParams(theta, theta_tilde))
    over = ratio * b > a
    if np.any(over):
        # the capacity constraint is active: b = a / ratio
        bs = b0[over] - tau * theta
        num = a0[over] + bs / ratio - tau * theta_tilde / ratio**2
        a_line = np.maximum(num / (1.0 + 1.0 / ratio**2), 0.0)
        a[over] = a_line
        b[over] = a_line / ratio
    return a, b[None]


def _prox_transfer_general(a0, b0, tau, theta, theta_tilde, ratio):
    bs = b0 - tau * theta
    pos = np.maximum(bs, 0.0)
    hi = np.maximum(a0, 0.0) + np.sqrt((pos**2).sum(axis=0)) + ratio * pos.sum(axis=0) + 1e-300

    def slope(a):
        d = 1.0 + 2.0 * tau * theta_tilde / a
        flows, u = _capped_flows(bs, d, a, ratio)
        return a - a0 - tau * (theta_tilde * flows**2).sum(axis=0) / a**2 - u / ratio, flows

    tiny = 1e-14 * (1.0 + hi)
    at_zero = slope(tiny)[0] >= 0
    lo = np.where(at_zero, 0.0, tiny)
    hi = np.where(at_zero, 0.0, hi)
    for _ in range(ROOT_MAXITER):
        mid = 0.5 * (lo + hi)
        live = ~at_zero
        if not live.any() or np.all((hi - lo)[live] <= ROOT_TOL * np.maximum(1.0, hi[live])):
            break
        s = slope(np.where(live, mid, 1.0))[0]
        hi = np.where(live & (s >= 0), mid, hi)
        lo = np.where(live & (s < 0), mid, lo)
    else:
        raise NoConvergence("transfer-cell prox bisection did not converge")
    a = 0.5 * (lo + hi)
    b = np.zeros_like(b0)
    live = a > 0
    if live.any():
        d = 1.0 + 2.0 * tau * theta_tilde / a[live]
        b[:, live] = _capped_flows(bs[:, live], d, a[live], ratio)[0]
    return a, b


# --------------------------------------------------------------------------
# quadratic and linear terms


def prox_linear(x, tau, c):
    return np.asarray(x, dtype=float) - tau * np.asarray(c, dtype=float)


def tracking_cost(m, weights, target, grid: Grid, mode: int = 1, one_sided: bool = False) -> float:
    """``sum_k w_k (h sum_l m[k, mode, l] - U_k)**2 dt`` over ``k < n_t``."""
    occ = np.sum(m[: grid.n_t, mode], axis=-1) * grid.h
    gap = occ - np.asarray(target, dtype=float)
    if one_sided:
        gap = np.maximum(gap, 0.0)
    return float(np.sum(np.asarray(weights, dtype=float) * gap**2) * grid.dt)


def prox_tracking(x, tau, weight, target, h, dt, one_sided: bool = False):
    """Prox of ``weight * dt * (h * sum(x) - target)**2`` on each row of ``x``.

    ``x`` has shape ``(..., n_h)``; ``weight`` and ``target`` broadcast over
    the leading axes. The minimizer is ``x - c 1`` (rank-one update).
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    w = np.asarray(weight, dtype=float) * dt
    sx = x.sum(axis=-1)
    s = (sx + 2 * tau * w * h * n * target) / (1 + 2 * tau * w * h**2 * n)
    c = 2 * tau * w * h * (h * s - target)
    if one_sided:
        c = np.where(h * sx <= target, 0.0, c)
    return x - np.asarray(c)[..., None]


def prox_tracking_conjugate(v, sigma, weight, target, h, dt):
    """Prox of ``sigma * f*`` for the two-sided tracking term ``f``.

    ``f*`` is finite only on multiples of the all-ones vector:
    ``f*(h z 1) = z target + z**2 / (4 weight dt)``.
    """
    v = np.asarray(v, dtype=float)
    n = v.shape[-1]
    w = np.asarray(weight, dtype=float) * dt
    z = (h * v.sum(axis=-1) - sigma * target) / (h**2 * n + sigma / (2 * w))
    return np.broadcast_to((h * z)[..., None], v.shape).copy()


def terminal_cost(m_final, weights, target, h) -> float:
    """``sum_{i,l} beta (mu - m)**2 h`` on the final density."""
    return float(np.sum(np.asarray(weights) * (np.asarray(target) - m_final) ** 2) * h)


def prox_terminal(x, tau, weights, target, h):
    c = 2 * tau * np.asarray(weights, dtype=float) * h
    return (np.asarray(x, dtype=float) + c * target) / (1 + c)


def prox_terminal_conjugate(v, sigma, weights, target, h):
    c = np.asarray(weights, dtype=float) * h
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (np.asarray(v, dtype=float) - sigma * np.asarray(target)) / (1 + sigma / (2 * c))
    return np.where(c > 0, out, 0.0)


def project_interval(x, lo, hi):
    return np.clip(x, lo, hi)


def prox_interval_conjugate(v, sigma, lo, hi):
    """Prox of ``sigma`` times the support function of ``[lo, hi]`` (via Moreau)."""
    v = np.asarray(v, dtype=float)
    return v - sigma * np.clip(v / sigma, lo, hi)


# --------------------------------------------------------------------------
# cost specification and objective


@dataclass(frozen=True)
class EnergyCost:
    """Electricity prices per step, in currency per kWh."""

    prices: np.ndarray


@dataclass(frozen=True)
class TrackingCost:
    weights: np.ndarray
    target: np.ndarray
    mode: int = 1
    one_sided: bool = False

    def __post_init__(self):
        if np.any(np.asarray(self.weights) <= 0):
            raise ValueError("tracking weights must be positive")


@dataclass(frozen=True)
class TerminalCost:
    weights: np.ndarray  # (n_modes, n_h)
    target: np.ndarray  # (n_modes, n_h) target density

    def __post_init__(self):
        if np.any(np.asarray(self.weights) < 0):
            raise ValueError("terminal weights must be nonnegative")


@dataclass(frozen=True)
class CostSpec:
    switching: dict = field(default_factory=dict)  # (i, j) -> PerspectiveParams
    energy: EnergyCost | None = None
    tracking: TrackingCost | None = None
    terminal: TerminalCost | None = None


def energy_cost(m, prices, modes: ModeSet, grid: Grid) -> float:
    """Electricity bill: ``sum_k sum_i P_i p_k (h sum_l m[k, i, l]) dt / 3600``."""
    mass = np.sum(m[: grid.n_t], axis=-1) * grid.h
    per_step = mass @ modes.power_kw
    return float(np.sum(np.asarray(prices, dtype=float) * per_step) * grid.dt / SECONDS_PER_HOUR)


def switching_cost(m, e, switching: dict, grid: Grid) -> float:
    total = 0.0
    for p, (i, j) in enumerate(mode_pairs(m.shape[1])):
        params = switching.get((i, j))
        if params is None:
            if np.any(e[:, p] < 0) or np.any((m[: grid.n_t, i] <= 0) & (e[:, p] > 0)):
                return np.inf
            continue
        total += float(np.sum(perspective_cost(m[: grid.n_t, i], e[:, p], params)))
    return total * grid.h * grid.dt


def total_objective(m, e, spec: CostSpec, grid: Grid, modes: ModeSet) -> float:
    total = switching_cost(m, e, spec.switching, grid)
    if spec.energy is not None:
        total += energy_cost(m, spec.energy.prices, modes, grid)
    if spec.tracking is not None:
        t = spec.tracking
        total += tracking_cost(m, t.weights, t.target, grid, t.mode, t.one_sided)
    if spec.terminal is not None:
        total += terminal_cost(m[-1], spec.terminal.weights, spec.terminal.target, grid.h)
    return total
