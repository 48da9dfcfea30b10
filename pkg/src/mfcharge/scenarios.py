"""Bundled case studies and scenario files.

A scenario file is JSON::

    {
      "base": "case1",                      # or "case2"
      "signals": {"price": "price.csv"},    # paths relative to the file
      "overrides": {"n": 100, "max_iter": 2000}
    }

Signals are CSV files with either one value per solver step or two columns
``time_s,value``; two-column files are resampled left-constant onto the
solver steps. Recognized overrides are listed in :data:`OVERRIDE_KEYS`.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import costs as C
from .dynamics import ConstraintSpec, check_cfl
from .errors import BadSignalLength, CflViolation, LengthMismatch, NotNormalized, ParseError
from .fleet import DeploymentMesh, build_mesh
from .grid import (Grid, Histogram, ModeSet, build_grid, build_modes, constant_rate, discretize_initial,
                   piecewise_linear_rate, uniform_density)
from .solver import CpParams

SIGNAL_KINDS = ("price", "target", "nominal", "correction")

# case-study constants
HORIZON = 5 * 3600.0
DT = 450.0
H = 0.05
P_ON_KW = 20.0
DRAIN = -3.86e-7  # SoC per second, idle vehicles
CHARGE_KNOTS = [[0.0, 1 / 45000], [0.75, 1 / 45000], [1.0, 0.0]]


@dataclass(frozen=True)
class Signal:
    samples: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in SIGNAL_KINDS:
            raise ValueError(f"unknown signal kind {self.kind!r}")
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=float))

    def __len__(self):
        return self.samples.size

    @classmethod
    def from_function(cls, fn, grid: Grid, kind: str) -> "Signal":
        return cls(np.array([fn(t) for t in grid.times[:-1]], dtype=float), kind)


@dataclass(frozen=True)
class Scenario:
    name: str
    grid: Grid
    modes: ModeSet
    constraints: ConstraintSpec
    costs: C.CostSpec
    initial: np.ndarray  # (n_modes, n_h) cell densities
    solver_params: CpParams
    deployment: DeploymentMesh
    n_vehicles: int
    signals: dict = field(default_factory=dict)
    seed: int | None = None
    config: dict = field(default_factory=dict)  # JSON-friendly record of how it was built

    def __post_init__(self):
        if check_cfl(self.grid, self.modes) > 1.0:
            raise CflViolation("scenario violates the CFL condition")
        mass = float(np.sum(self.initial) * self.grid.h)
        if abs(mass - 1.0) > 1e-10:
            raise NotNormalized(f"initial mass {mass!r}")

    def digest(self) -> str:
        blob = json.dumps(self.config, sort_keys=True).encode()
        return hashlib.sha256(blob + self.initial.tobytes()).hexdigest()


# --------------------------------------------------------------------------
# signals


def _parse_rows(path: Path):
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    rows = []
    for lineno, row in enumerate(csv.reader(text.splitlines()), 1):
        if not row or all(not c.strip() for c in row) or row[0].lstrip().startswith("#"):
            continue
        try:
            rows.append([float(c) for c in row])
        except ValueError:
            if not rows and lineno == 1:
                continue  # header
            raise ParseError(f"{path}:{lineno}: non-numeric entry {row!r}", line=lineno) from None
        if len(rows[-1]) not in (1, 2) or len(rows[-1]) != len(rows[0]):
            raise ParseError(f"{path}:{lineno}: expected 1 or 2 consistent columns", line=lineno)
    if not rows:
        raise ParseError(f"{path}: no data rows", line=1)
    return np.array(rows)


def resample_left_constant(times, values, grid: Grid) -> np.ndarray:
    """Value at each step start ``t_k`` = last sample with time ``<= t_k``."""
    times, values = np.asarray(times, float), np.asarray(values, float)
    if np.any(np.diff(times) <= 0):
        raise ParseError("signal times must be strictly increasing")
    if times[0] > 1e-9:
        raise LengthMismatch("signal does not start at t = 0")
    idx = np.searchsorted(times, grid.times[:-1] + 1e-9, side="right") - 1
    return values[idx]


def load_signal(path, grid: Grid, kind: str = "price") -> Signal:
    rows = _parse_rows(Path(path))
    if rows.shape[1] == 1:
        if rows.shape[0] != grid.n_t:
            raise LengthMismatch(f"{path}: {rows.shape[0]} samples, grid has {grid.n_t} steps")
        return Signal(rows[:, 0], kind)
    return Signal(resample_left_constant(rows[:, 0], rows[:, 1], grid), kind)


def bundled_signal(name: str, grid: Grid, kind: str) -> Signal:
    with resources.as_file(resources.files("mfcharge") / "data" / name) as p:
        return load_signal(p, grid, kind)


def _check_length(sig: Signal, grid: Grid, what: str):
    if len(sig) != grid.n_t:
        raise BadSignalLength(f"{what} has {len(sig)} samples, expected {grid.n_t}")


# --------------------------------------------------------------------------
# builders

OVERRIDE_KEYS = {
    "n", "seed", "max_iter", "theta_relax", "tau", "gamma", "tol_primal", "tol_dual",
    "horizon", "dt", "h", "mesh_u", "mesh_dr", "theta", "theta_tilde",
    "s_min", "epsilon", "d_upper_1", "tracking_weight", "terminal_weight", "init_low", "init_high",
}


def _check_overrides(overrides: dict):
    bad = set(overrides) - OVERRIDE_KEYS
    if bad:
        raise ParseError(f"unknown override keys: {sorted(bad)}")


def _common(overrides, defaults):
    o = {**defaults, **overrides}
    grid = build_grid(o["horizon"], o["dt"], o["h"])
    modes = build_modes(grid, [
        ("idle", constant_rate(DRAIN), 0.0),
        ("charging", piecewise_linear_rate(CHARGE_KNOTS), P_ON_KW),
    ])
    params = CpParams(theta_relax=o["theta_relax"], tau=o["tau"], gamma=o["gamma"], max_iter=int(o["max_iter"]),
                      tol_primal=o["tol_primal"], tol_dual=o["tol_dual"])
    mesh = build_mesh(o.get("mesh_u") or grid.h, o.get("mesh_dr") or grid.dt)
    sw = C.PerspectiveParams(o["theta"], o["theta_tilde"])
    return o, grid, modes, params, mesh, {(0, 1): sw, (1, 0): sw}


_SOLVER_DEFAULTS = dict(horizon=HORIZON, dt=DT, h=H, tol_primal=1e-7, tol_dual=1e-6, seed=None,
                        mesh_u=None, mesh_dr=None)


def build_case1(price: Signal | None = None, overrides: dict | None = None) -> Scenario:
    """Peak/off-peak pricing with a cap on the charging share and a terminal SoC floor."""
    overrides = dict(overrides or {})
    _check_overrides(overrides)
    defaults = dict(_SOLVER_DEFAULTS, n=500, max_iter=12000, theta_relax=0.5, tau=1.8, gamma=0.5,
                    theta=0.04, theta_tilde=20.0, s_min=0.7, epsilon=0.0, d_upper_1=1 / 3,
                    init_low=0.2, init_high=0.6)
    o, grid, modes, params, mesh, switching = _common(overrides, defaults)
    if price is None:
        price = bundled_signal("case1_price.csv", grid, "price")
    _check_length(price, grid, "price")
    d_upper = np.tile([1.0, o["d_upper_1"]], (grid.n_t, 1))
    cons = ConstraintSpec(np.zeros_like(d_upper), d_upper, s_min=o["s_min"], epsilon=o["epsilon"])
    cost = C.CostSpec(switching=switching, energy=C.EnergyCost(price.samples))
    initial = discretize_initial([uniform_density(o["init_low"], o["init_high"]), None], grid)
    config = {"base": "case1", "overrides": {k: v for k, v in o.items() if k in OVERRIDE_KEYS},
              "signals": {"price": price.samples.tolist()}}
    return Scenario("case1", grid, modes, cons, cost, initial, params, mesh, int(o["n"]),
                    {"price": price}, o["seed"], config)


def build_case2(u_pred: Signal | None = None, u_cor: Signal | None = None, overrides: dict | None = None) -> Scenario:
    """Tracking of a mode-1 occupancy target with a terminal distribution penalty."""
    overrides = dict(overrides or {})
    _check_overrides(overrides)
    defaults = dict(_SOLVER_DEFAULTS, n=1000, max_iter=15000, theta_relax=0.5, tau=0.5, gamma=0.5,
                    theta=0.004, theta_tilde=2.0, tracking_weight=50.0, terminal_weight=50.0,
                    init_low=0.55, init_high=0.6)
    o, grid, modes, params, mesh, switching = _common(overrides, defaults)
    if u_pred is None:
        u_pred = bundled_signal("case2_u_pred.csv", grid, "nominal")
    if u_cor is None:
        u_cor = bundled_signal("case2_u_cor.csv", grid, "correction")
    _check_length(u_pred, grid, "u_pred")
    _check_length(u_cor, grid, "u_cor")
    u_tar = Signal(u_pred.samples + u_cor.samples, "target")
    target = discretize_initial([uniform_density(0.6, 0.8), None], grid)
    tracking = C.TrackingCost(np.full(grid.n_t, float(o["tracking_weight"])), u_tar.samples, mode=1)
    terminal = C.TerminalCost(np.full((2, grid.n_h), float(o["terminal_weight"])), target)
    cost = C.CostSpec(switching=switching, tracking=tracking, terminal=terminal)
    initial = discretize_initial([uniform_density(o["init_low"], o["init_high"]), None], grid)
    config = {"base": "case2", "overrides": {k: v for k, v in o.items() if k in OVERRIDE_KEYS},
              "signals": {"u_pred": u_pred.samples.tolist(), "u_cor": u_cor.samples.tolist()}}
    return Scenario("case2", grid, modes, ConstraintSpec.unconstrained(grid.n_t, 2), cost, initial, params, mesh,
                    int(o["n"]), {"u_pred": u_pred, "u_cor": u_cor, "u_tar": u_tar}, o["seed"], config)


BUILDERS = {"case1": build_case1, "case2": build_case2}
_SIGNAL_ROLES = {"case1": {"price": "price"}, "case2": {"u_pred": "nominal", "u_cor": "correction"}}


def with_overrides(scenario: Scenario, **overrides) -> Scenario:
    """Rebuild a bundled scenario with extra overrides (signals are kept)."""
    base = scenario.config["base"]
    merged = {**scenario.config["overrides"], **overrides}
    sigs = {k: scenario.signals[k] for k in _SIGNAL_ROLES[base]}
    return BUILDERS[base](**sigs, overrides=merged)


def load_scenario(spec: str | Path) -> Scenario:
    """Build a scenario from a bundled name (``case1``, ``case2``) or a JSON file."""
    if str(spec) in BUILDERS:
        return BUILDERS[str(spec)]()
    path = Path(spec)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ParseError(f"cannot read scenario {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}: {exc.msg}", line=exc.lineno) from exc
    if not isinstance(doc, dict) or doc.get("base") not in BUILDERS:
        raise ParseError(f"{path}: 'base' must be one of {sorted(BUILDERS)}")
    unknown = set(doc) - {"base", "signals", "overrides", "description"}
    if unknown:
        raise ParseError(f"{path}: unknown keys {sorted(unknown)}")
    base = doc["base"]
    overrides = doc.get("overrides", {})
    if not isinstance(overrides, dict):
        raise ParseError(f"{path}: 'overrides' must be an object")
    _check_overrides(overrides)
    # build once without signals to learn the grid, then load the files on it
    grid = build_grid(overrides.get("horizon", HORIZON), overrides.get("dt", DT), overrides.get("h", H))
    sigs = {}
    for role, fname in doc.get("signals", {}).items():
        if role not in _SIGNAL_ROLES[base]:
            raise ParseError(f"{path}: signal {role!r} not used by {base}")
        sigs[role] = load_signal(path.parent / fname, grid, _SIGNAL_ROLES[base][role])
    return BUILDERS[base](**sigs, overrides=overrides)


def scenario_from_config(config: dict) -> Scenario:
    """Inverse of the ``config`` record stored on every built scenario."""
    base = config["base"]
    sigs = {role: Signal(np.asarray(config["signals"][role], float), kind)
            for role, kind in _SIGNAL_ROLES[base].items()}
    return BUILDERS[base](**sigs, overrides=dict(config["overrides"]))


def scenario_to_dict(s: Scenario) -> dict:
    """JSON-friendly description (parameters and derived arrays)."""
    return {
        "name": s.name,
        "config": s.config,
        "grid": dataclasses.asdict(s.grid),
        "modes": [{"name": m.name, "rate": getattr(m.rate, "spec", None), "power_kw": m.power_kw} for m in s.modes],
        "solver_params": dataclasses.asdict(s.solver_params),
        "deployment": dataclasses.asdict(s.deployment),
        "n_vehicles": s.n_vehicles,
        "s_min": s.constraints.s_min,
        "epsilon": s.constraints.epsilon,
        "digest": s.digest(),
    }


__all__ = ["Signal", "Scenario", "Histogram", "build_case1", "build_case2", "load_signal", "load_scenario",
           "with_overrides", "scenario_to_dict", "scenario_from_config", "resample_left_constant"]
