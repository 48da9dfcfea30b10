"""Deployment of a mean-field control on a finite fleet of vehicles.

Each step applies discretized mode transfers (first-in-first-out, with the
scenario's mass caps turned into headcount caps) and then an explicit Euler
update of every vehicle's SoC.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import ConstraintSpec
from .errors import MeshMisaligned
from .grid import Grid, ModeSet, mode_pairs

log = logging.getLogger(__name__)

MESH_WARN_THRESHOLD = 0.5
_COUNT_EPS = 1e-9


@dataclass
class FleetState:
    soc: np.ndarray
    mode: np.ndarray
    entry_time: np.ndarray
    rng_seed: int | None = None

    def __post_init__(self):
        self.soc = np.clip(np.asarray(self.soc, dtype=float), 0.0, 1.0)
        self.mode = np.asarray(self.mode, dtype=int)
        self.entry_time = np.asarray(self.entry_time, dtype=float)
        if not (self.soc.shape == self.mode.shape == self.entry_time.shape):
            raise ValueError("soc, mode and entry_time must have the same length")

    @property
    def n(self) -> int:
        return self.soc.size

    def headcounts(self, n_modes: int) -> np.ndarray:
        return np.bincount(self.mode, minlength=n_modes)

    def copy(self) -> "FleetState":
        return FleetState(self.soc.copy(), self.mode.copy(), self.entry_time.copy(), self.rng_seed)


@dataclass(frozen=True)
class DeploymentMesh:
    """SoC cells of width ``u`` and time steps of ``dr`` seconds."""

    u: float
    dr: float
    n_u: int

    def __post_init__(self):
        if self.u <= 0 or self.dr <= 0 or self.n_u < 1:
            raise MeshMisaligned("mesh sizes must be positive")
        if abs(self.n_u * self.u - 1.0) > 1e-9:
            raise MeshMisaligned(f"n_u * u = {self.n_u * self.u!r}, expected 1")

    def n_steps(self, horizon: float) -> int:
        q = horizon / self.dr
        n = round(q)
        if n < 1 or abs(q - n) > 1e-9 * max(q, 1.0):
            raise MeshMisaligned(f"dr = {self.dr} does not divide the horizon {horizon}")
        return int(n)

    def cell_of(self, soc) -> np.ndarray:
        idx = np.floor(np.asarray(soc, dtype=float) / self.u + 1e-12).astype(int)
        return np.clip(idx, 0, self.n_u - 1)


def build_mesh(u: float, dr: float) -> DeploymentMesh:
    q = 1.0 / u
    n_u = round(q)
    if abs(q - n_u) > 1e-9 * q:
        raise MeshMisaligned(f"1/u = {q!r} is not an integer")
    return DeploymentMesh(float(u), float(dr), int(n_u))


def solver_mesh(grid: Grid, factor: int = 1) -> DeploymentMesh:
    """The solver mesh, optionally coarsened ``factor`` times in SoC and time."""
    return build_mesh(grid.h * factor, grid.dt * factor)


def mesh_condition_value(n: int, mesh: DeploymentMesh, alpha_sup: float, horizon: float) -> float:
    """``T / (n u dr) + ||alpha|| (dr + u)``; should be well below 1."""
    if n < 1:
        raise ValueError("n must be at least 1")
    return horizon / (n * mesh.u * mesh.dr) + alpha_sup * (mesh.dr + mesh.u)


# --------------------------------------------------------------------------
# control interpolation


def _overlap(lo_a, hi_a, lo_b, hi_b):
    return np.clip(np.minimum(hi_a[:, None], hi_b[None, :]) - np.maximum(lo_a[:, None], lo_b[None, :]), 0.0, None)


def _linear_cell_average(values, centers, lo, hi):
    """Average over ``[lo, hi]`` of the linear interpolant through ``(centers, values)``."""
    knots = centers[(centers > lo) & (centers < hi)]
    xs = np.concatenate([[lo], knots, [hi]])
    ys = np.interp(xs, centers, values)
    return float(np.sum(0.5 * (ys[1:] + ys[:-1]) * np.diff(xs)) / (hi - lo))


def interpolate_control(alpha: np.ndarray, grid: Grid, mesh: DeploymentMesh, kind: str = "constant") -> np.ndarray:
    """Average transition intensities over the deployment cells.

    ``alpha`` has shape ``(n_t, n_pairs, n_h)`` and is read as constant in
    time over each solver step. In SoC it is either constant per solver cell
    (``kind="constant"``) or linear between cell centers (``kind="linear"``).
    Returns ``(n_r, n_pairs, n_u)``.
    """
    n_r = mesh.n_steps(grid.horizon)
    r_edges = mesh.dr * np.arange(n_r + 1)
    wt = _overlap(r_edges[:-1], r_edges[1:], grid.times[:-1], grid.times[1:]) / mesh.dr
    a_time = np.einsum("rk,kpl->rpl", wt, alpha)
    u_edges = mesh.u * np.arange(mesh.n_u + 1)
    if kind == "constant":
        ws = _overlap(u_edges[:-1], u_edges[1:], grid.half_points[:-1], grid.half_points[1:]) / mesh.u
        return np.einsum("ul,rpl->rpu", ws, a_time)
    if kind == "linear":
        out = np.empty(a_time.shape[:2] + (mesh.n_u,))
        for r in range(n_r):
            for p in range(a_time.shape[1]):
                for c in range(mesh.n_u):
                    out[r, p, c] = _linear_cell_average(a_time[r, p], grid.centers, u_edges[c], u_edges[c + 1])
        return out
    raise ValueError(f"unknown interpolation kind {kind!r}")


# --------------------------------------------------------------------------
# fleet steps


def transfer_count(n_cell: int, a: float, dr: float, d_upper_j: float) -> int:
    """Vehicles to move out of a cell: floor towards capped modes, ceil otherwise."""
    if n_cell <= 0 or a <= 0:
        return 0
    x = n_cell * a * dr
    k = math.floor(x + _COUNT_EPS) if d_upper_j < 1.0 else math.ceil(x - _COUNT_EPS)
    return int(min(max(k, 0), n_cell))


@dataclass
class TransferRecord:
    step: int
    time: float
    vehicle: int
    source: int
    dest: int
    soc: float


def sample_initial_fleet(m0: np.ndarray, grid: Grid, n: int, rng_seed: int | None = None) -> FleetState:
    """Stratified inverse-CDF sample of ``n`` vehicles from cell densities ``m0``.

    Vehicle ``z`` sits at quantile ``(z + 1/2) / n`` of the distribution
    obtained by ordering modes first and SoC second.
    """
    mass = (np.asarray(m0, dtype=float) * grid.h).ravel()
    cum = np.cumsum(mass)
    q = (np.arange(n) + 0.5) / n * cum[-1]
    idx = np.minimum(np.searchsorted(cum, q, side="right"), mass.size - 1)
    prev = np.where(idx > 0, cum[idx - 1], 0.0)
    frac = np.clip((q - prev) / np.where(mass[idx] > 0, mass[idx], 1.0), 0.0, 1.0)
    mode, cell = np.divmod(idx, grid.n_h)
    soc = (cell + frac) * grid.h
    return FleetState(soc, mode, np.zeros(n), rng_seed)


def _fifo_order(members: np.ndarray, entry: np.ndarray, rng) -> np.ndarray:
    if rng is None:
        return members[np.lexsort((members, entry[members]))]
    return members[np.lexsort((rng.permutation(members.size), entry[members]))]


def step_transfers(fleet: FleetState, a_step: np.ndarray, d_lower: np.ndarray, d_upper: np.ndarray,
                   mesh: DeploymentMesh, t_next: float, step: int = 0, rng=None):
    """Mode transfers of one deployment step; returns the new fleet and the log.

    ``a_step`` has shape ``(n_pairs, n_u)``. Modes and cells are read at the
    start of the step; sweep order is source mode, SoC cell, destination mode.
    """
    out = fleet.copy()
    n_modes = len(d_upper)
    pairs = {pq: p for p, pq in enumerate(mode_pairs(n_modes))}
    n = fleet.n
    count = fleet.headcounts(n_modes).astype(int)
    cap_hi = np.where(d_upper < 1.0, np.floor(n * d_upper + _COUNT_EPS), n).astype(int)
    cap_lo = np.ceil(n * d_lower - _COUNT_EPS).astype(int)
    cells = mesh.cell_of(fleet.soc)
    log_rows = []
    for i in range(n_modes):
        in_mode = fleet.mode == i
        for c in np.unique(cells[in_mode]):
            members = np.flatnonzero(in_mode & (cells == c))
            queue = _fifo_order(members, fleet.entry_time, rng)
            for j in range(n_modes):
                if j == i:
                    continue
                want = transfer_count(members.size, a_step[pairs[(i, j)], c], mesh.dr, d_upper[j])
                moved = 0
                for z in queue:
                    if moved >= want or count[j] + 1 > cap_hi[j] or count[i] - 1 < cap_lo[i]:
                        break
                    if out.mode[z] != i:
                        continue
                    out.mode[z] = j
                    out.entry_time[z] = t_next
                    count[i] -= 1
                    count[j] += 1
                    moved += 1
                    log_rows.append(TransferRecord(step, t_next - mesh.dr, int(z), i, j, float(fleet.soc[z])))
    return out, log_rows


def step_soc(fleet: FleetState, modes: ModeSet, dr: float) -> FleetState:
    """Explicit Euler SoC update with each vehicle's current mode, clamped to ``[0, 1]``."""
    out = fleet.copy()
    for i, md in enumerate(modes):
        sel = out.mode == i
        if sel.any():
            s = out.soc[sel]
            out.soc[sel] = np.clip(s + md.rate(s) * dr, 0.0, 1.0)
    return out


# --------------------------------------------------------------------------
# full run


@dataclass
class FleetTrajectory:
    times: np.ndarray  # (n_r + 1,)
    soc: np.ndarray  # (n_r + 1, n)
    mode: np.ndarray  # (n_r + 1, n)
    headcounts: np.ndarray  # (n_r + 1, n_modes)
    transfers: list
    mesh_condition: float
    mesh_warning: bool

    @property
    def n(self) -> int:
        return self.soc.shape[1]

    def transfers_per_vehicle(self) -> np.ndarray:
        return np.bincount([t.vehicle for t in self.transfers], minlength=self.n)


def simulate(fleet0: FleetState, a: np.ndarray, mesh: DeploymentMesh, constraints: ConstraintSpec,
             modes: ModeSet, grid: Grid, warn_threshold: float = MESH_WARN_THRESHOLD) -> FleetTrajectory:
    """Alternate transfers and SoC updates over every deployment step.

    ``a`` is the interpolated control ``(n_r, n_pairs, n_u)``. Mass bounds
    for a deployment step are those of the solver step containing its start.
    """
    n_r = mesh.n_steps(grid.horizon)
    if a.shape[0] != n_r:
        raise MeshMisaligned(f"control has {a.shape[0]} steps, mesh needs {n_r}")
    cond = mesh_condition_value(fleet0.n, mesh, float(np.max(a, initial=0.0)), grid.horizon)
    warn = cond >= warn_threshold
    (log.warning if warn else log.info)("mesh condition value %.4g (threshold %.3g)", cond, warn_threshold)
    rng = None if fleet0.rng_seed is None else np.random.default_rng(fleet0.rng_seed)
    n_modes = len(modes)
    times = mesh.dr * np.arange(n_r + 1)
    socs = np.empty((n_r + 1, fleet0.n))
    mds = np.empty((n_r + 1, fleet0.n), dtype=int)
    fleet, transfers = fleet0.copy(), []
    socs[0], mds[0] = fleet.soc, fleet.mode
    lo_all, hi_all = constraints.step_bounds(grid.n_t + 1)
    for r in range(n_r):
        k = min(int(math.floor(times[r] / grid.dt + 1e-9)), grid.n_t)
        fleet, rows = step_transfers(fleet, a[r], lo_all[k], hi_all[k], mesh, times[r + 1], r, rng)
        transfers.extend(rows)
        fleet = step_soc(fleet, modes, mesh.dr)
        socs[r + 1], mds[r + 1] = fleet.soc, fleet.mode
    heads = np.stack([np.bincount(row, minlength=n_modes) for row in mds])
    return FleetTrajectory(times, socs, mds, heads, transfers, cond, warn)


@dataclass
class FleetStats:
    n: int
    total_transfers: int
    transfer_histogram: dict
    final_soc: np.ndarray
    fraction_below: float
    threshold: float
    first_passage: np.ndarray  # seconds, NaN if never reached
    occupancy: np.ndarray  # (n_r + 1, n_modes) fractions
    sup_distance: float | None = None
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "n": self.n,
            "total_transfers": self.total_transfers,
            "mean_transfers_per_vehicle": self.total_transfers / self.n,
            "transfer_histogram": {str(k): v for k, v in sorted(self.transfer_histogram.items())},
            "threshold_soc": self.threshold,
            "fraction_below_threshold": self.fraction_below,
            "never_reached_threshold": int(np.sum(np.isnan(self.first_passage))),
            "occupancy_sup_distance": self.sup_distance,
            **self.extra,
        }


def first_passage_times(traj: FleetTrajectory, threshold: float) -> np.ndarray:
    reached = traj.soc >= threshold - 1e-12
    hit = reached.any(axis=0)
    first = np.argmax(reached, axis=0)
    return np.where(hit, traj.times[first], np.nan)


def occupancy_distance(empirical: np.ndarray, continuum: np.ndarray) -> float:
    """Sup-distance between two occupancy curves sampled on the same times."""
    return float(np.max(np.abs(np.asarray(empirical) - np.asarray(continuum))))


def fleet_stats(traj: FleetTrajectory, threshold: float, continuum_occupancy: np.ndarray | None = None,
                mode: int = 1) -> FleetStats:
    """Transfer counts, final SoC, threshold statistics and occupancy curves.

    ``continuum_occupancy`` is the continuum mass of ``mode`` at the
    trajectory's times; when given, the sup-distance to the empirical curve
    is reported.
    """
    per = traj.transfers_per_vehicle()
    hist = {int(k): int(v) for k, v in zip(*np.unique(per, return_counts=True))}
    occ = traj.headcounts / traj.n
    dist = None
    if continuum_occupancy is not None:
        dist = occupancy_distance(occ[:, mode], continuum_occupancy)
    final = traj.soc[-1]
    return FleetStats(traj.n, int(per.sum()), hist, final, float(np.mean(final < threshold)), threshold,
                      first_passage_times(traj, threshold), occ, dist,
                      {"mesh_condition": traj.mesh_condition, "mesh_warning": bool(traj.mesh_warning)})


def continuum_occupancy(m: np.ndarray, grid: Grid, times: np.ndarray, mode: int = 1) -> np.ndarray:
    """Mode mass of a density trajectory at the given times (nearest earlier solver step)."""
    mass = np.sum(m[:, mode], axis=-1) * grid.h
    k = np.minimum(np.floor(np.asarray(times) / grid.dt + 1e-9).astype(int), grid.n_t)
    return mass[k]
