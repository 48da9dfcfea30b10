"""Discretization grid, charging modes and the density/flow containers.

Array conventions used throughout the package:

* density ``m`` has shape ``(n_t + 1, n_modes, n_h)``; ``m[k, i, l]`` is the
  density of vehicles in mode ``i`` with SoC in ``[l h, (l + 1) h)`` at time
  ``k dt``. The mass of a cell is ``m * h``.
* flow ``e`` has shape ``(n_t, n_pairs, n_h)``; pair ``p`` is the ordered
  mode pair ``pairs[p] = (i, j)``, ``i != j``, in lexicographic order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from .errors import IndexOutOfRange, InvalidRate, NonIntegerGrid, NotNormalized

RateFunction = Callable[[np.ndarray], np.ndarray]

_DIVISIBILITY_RTOL = 1e-9


def _as_integer_ratio(num, den, what):
    q = num / den
    n = round(q)
    if n < 1 or abs(q - n) > _DIVISIBILITY_RTOL * max(1.0, abs(q)):
        raise NonIntegerGrid(f"{what} = {q!r} is not an integer")
    return int(n)


@dataclass(frozen=True)
class Grid:
    """Uniform time/SoC grid. ``horizon`` and ``dt`` are in seconds."""

    horizon: float
    dt: float
    h: float
    n_t: int
    n_h: int

    @property
    def times(self) -> np.ndarray:
        """Time nodes ``t_k = k dt`` for ``k = 0..n_t``."""
        return self.dt * np.arange(self.n_t + 1)

    @property
    def centers(self) -> np.ndarray:
        return (np.arange(self.n_h) + 0.5) * self.h

    @property
    def half_points(self) -> np.ndarray:
        """Cell interfaces ``x_{l-1/2} = l h`` for ``l = 0..n_h``."""
        return np.arange(self.n_h + 1) * self.h

    def cell_of(self, soc) -> np.ndarray:
        """Index of the SoC cell containing ``soc``; SoC 1 maps to the last cell."""
        idx = np.floor(np.asarray(soc, dtype=float) / self.h + 1e-12).astype(int)
        return np.clip(idx, 0, self.n_h - 1)


def build_grid(horizon: float, dt: float, h: float) -> Grid:
    if dt <= 0 or h <= 0 or horizon <= 0:
        raise NonIntegerGrid("horizon, dt and h must be positive")
    n_t = _as_integer_ratio(horizon, dt, "horizon/dt")
    n_h = _as_integer_ratio(1.0, h, "1/h")
    return Grid(float(horizon), float(dt), float(h), n_t, n_h)


# --------------------------------------------------------------------------
# charging modes


def constant_rate(value: float) -> RateFunction:
    """Constant SoC drift, forced to zero on the boundary it flows into.

    A positive rate vanishes at ``s = 1`` and a negative one at ``s = 0``.
    """

    def rate(s):
        s = np.asarray(s, dtype=float)
        out = np.full(s.shape, float(value))
        if value > 0:
            out[s >= 1.0] = 0.0
        elif value < 0:
            out[s <= 0.0] = 0.0
        return out

    rate.spec = {"type": "constant", "value": float(value)}
    return rate


def piecewise_linear_rate(knots: Sequence[Sequence[float]]) -> RateFunction:
    """Rate interpolated linearly between ``(soc, value)`` knots."""
    xs = np.array([k[0] for k in knots], dtype=float)
    ys = np.array([k[1] for k in knots], dtype=float)
    if np.any(np.diff(xs) <= 0):
        raise InvalidRate("rate knots must have strictly increasing SoC")

    def rate(s):
        return np.interp(np.asarray(s, dtype=float), xs, ys)

    rate.spec = {"type": "piecewise_linear", "knots": [[float(x), float(y)] for x, y in zip(xs, ys)]}
    return rate


@dataclass(frozen=True)
class Mode:
    name: str
    rate: RateFunction = field(repr=False, compare=False)
    rate_at_half_points: np.ndarray = field(repr=False, compare=False)
    sign: int  # +1 nonnegative rate, -1 nonpositive rate, 0 identically zero
    power_kw: float = 0.0

    @property
    def max_rate(self) -> float:
        return float(np.max(np.abs(self.rate_at_half_points)))


def make_mode(name: str, rate: RateFunction, grid: Grid, power_kw: float = 0.0,
              atol: float = 1e-15) -> Mode:
    """Sample ``rate`` at the cell interfaces and validate the sign rules."""
    b = np.asarray(rate(grid.half_points), dtype=float)
    if np.all(np.abs(b) <= atol):
        sign = 0
        b = np.zeros_like(b)
    elif np.all(b >= -atol):
        sign = 1
        if abs(b[-1]) > atol:
            raise InvalidRate(f"mode {name!r}: nonnegative rate must vanish at s=1, got {b[-1]!r}")
        if np.any(np.diff(b) > atol):
            raise InvalidRate(f"mode {name!r}: nonnegative rate must be non-increasing")
        b = np.maximum(b, 0.0)
    elif np.all(b <= atol):
        sign = -1
        if abs(b[0]) > atol:
            raise InvalidRate(f"mode {name!r}: nonpositive rate must vanish at s=0, got {b[0]!r}")
        b = np.minimum(b, 0.0)
    else:
        raise InvalidRate(f"mode {name!r}: rate changes sign on [0, 1]")
    b[-1 if sign >= 0 else 0] = 0.0
    b.setflags(write=False)
    return Mode(name, rate, b, sign, float(power_kw))


@dataclass(frozen=True)
class ModeSet:
    modes: tuple[Mode, ...]

    def __len__(self):
        return len(self.modes)

    def __getitem__(self, i) -> Mode:
        return self.modes[i]

    def __iter__(self):
        return iter(self.modes)

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return mode_pairs(len(self.modes))

    @property
    def power_kw(self) -> np.ndarray:
        return np.array([m.power_kw for m in self.modes])


def build_modes(grid: Grid, specs: Sequence[tuple]) -> ModeSet:
    """Build a ModeSet from ``(name, rate_fn, power_kw)`` tuples."""
    return ModeSet(tuple(make_mode(name, rate, grid, power) for name, rate, power in specs))


def mode_pairs(n_modes: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(n_modes) for j in range(n_modes) if i != j]


def incidence(n_modes: int) -> np.ndarray:
    """Matrix ``R`` with ``(R e)_i = sum_j e_{j,i} - e_{i,j}``."""
    pairs = mode_pairs(n_modes)
    r = np.zeros((n_modes, len(pairs)))
    for p, (i, j) in enumerate(pairs):
        r[i, p] -= 1.0
        r[j, p] += 1.0
    return r


# --------------------------------------------------------------------------
# flat layout of the unknowns


@dataclass(frozen=True)
class VariableLayout:
    """Packing of ``(m, e)`` into one flat vector, ``m`` first (C order)."""

    n_t: int
    n_modes: int
    n_h: int

    @property
    def n_pairs(self) -> int:
        return self.n_modes * (self.n_modes - 1)

    @property
    def m_shape(self) -> tuple[int, int, int]:
        return (self.n_t + 1, self.n_modes, self.n_h)

    @property
    def e_shape(self) -> tuple[int, int, int]:
        return (self.n_t, self.n_pairs, self.n_h)

    @property
    def n_m(self) -> int:
        return int(np.prod(self.m_shape))

    @property
    def n_e(self) -> int:
        return int(np.prod(self.e_shape))

    @property
    def size(self) -> int:
        return self.n_m + self.n_e

    def pack(self, m, e) -> np.ndarray:
        return np.concatenate([np.ravel(m), np.ravel(e)])

    def unpack(self, x):
        x = np.asarray(x)
        return x[: self.n_m].reshape(self.m_shape), x[self.n_m:].reshape(self.e_shape)

    def m_index(self, k, i, l) -> int:
        if not (0 <= k <= self.n_t and 0 <= i < self.n_modes and 0 <= l < self.n_h):
            raise IndexOutOfRange(f"density index {(k, i, l)} outside {self.m_shape}")
        return (k * self.n_modes + i) * self.n_h + l

    def e_index(self, k, p, l) -> int:
        if not (0 <= k < self.n_t and 0 <= p < self.n_pairs and 0 <= l < self.n_h):
            raise IndexOutOfRange(f"flow index {(k, p, l)} outside {self.e_shape}")
        return self.n_m + (k * self.n_pairs + p) * self.n_h + l

    def decode(self, idx: int) -> tuple[str, int, int, int]:
        """Inverse of :meth:`m_index` / :meth:`e_index`."""
        if not 0 <= idx < self.size:
            raise IndexOutOfRange(f"flat index {idx} outside [0, {self.size})")
        if idx < self.n_m:
            k, rest = divmod(idx, self.n_modes * self.n_h)
            i, l = divmod(rest, self.n_h)
            return "m", k, i, l
        idx -= self.n_m
        k, rest = divmod(idx, self.n_pairs * self.n_h)
        p, l = divmod(rest, self.n_h)
        return "e", k, p, l


def layout_for(grid: Grid, n_modes: int) -> VariableLayout:
    return VariableLayout(grid.n_t, n_modes, grid.n_h)


# --------------------------------------------------------------------------
# initial condition


@dataclass(frozen=True)
class Histogram:
    """Piecewise-constant density on ``[0, 1]``: ``values[q]`` on ``[edges[q], edges[q+1])``."""

    edges: np.ndarray
    values: np.ndarray

    def mass(self) -> float:
        return float(np.sum(np.diff(self.edges) * self.values))

    def cell_integrals(self, grid: Grid) -> np.ndarray:
        lo = grid.half_points[:-1, None]
        hi = grid.half_points[1:, None]
        overlap = np.clip(np.minimum(hi, self.edges[None, 1:]) - np.maximum(lo, self.edges[None, :-1]), 0.0, None)
        return overlap @ self.values


def uniform_density(low: float, high: float, mass: float = 1.0) -> Histogram:
    return Histogram(np.array([low, high], dtype=float), np.array([mass / (high - low)]))


def _cell_integrals(density, grid: Grid) -> np.ndarray:
    if density is None:
        return np.zeros(grid.n_h)
    if isinstance(density, Histogram):
        return density.cell_integrals(grid)
    out = np.empty(grid.n_h)
    for l in range(grid.n_h):
        lo, hi = l * grid.h, (l + 1) * grid.h
        out[l] = integrate.quad(lambda s: float(density(s)), lo, hi, limit=200, epsabs=1e-14, epsrel=1e-12)[0]
    return out


def discretize_initial(densities: Sequence, grid: Grid) -> np.ndarray:
    """Cell averages ``(1/h) * integral`` of each mode's initial density.

    ``densities`` holds one entry per mode: a :class:`Histogram`, a callable
    density on ``[0, 1]``, or ``None`` for an empty mode. Returns an array of
    shape ``(n_modes, n_h)``.
    """
    integrals = np.stack([_cell_integrals(d, grid) for d in densities])
    total = integrals.sum()
    if abs(total - 1.0) > 1e-6:
        raise NotNormalized(f"initial distribution has total mass {total!r}, expected 1")
    return integrals / grid.h


def total_mass(m: np.ndarray, k: int, h: float) -> float:
    """Total mass ``sum_{i,l} m[k, i, l] h`` at time index ``k``."""
    if not 0 <= k < m.shape[0]:
        raise IndexOutOfRange(f"time index {k} outside [0, {m.shape[0] - 1}]")
    return float(np.sum(m[k]) * h)


def mode_mass(m: np.ndarray, h: float) -> np.ndarray:
    """Mass per time step and mode, shape ``(n_steps, n_modes)``."""
    return np.sum(m, axis=-1) * h


def ceil_cells(value: float, h: float) -> int:
    """``ceil(value / h)`` robust to the rounding of e.g. ``0.7 / 0.05``."""
    q = value / h
    n = round(q)
    return int(n) if math.isclose(q, n, rel_tol=1e-9, abs_tol=1e-12) else int(math.ceil(q))
