"""Run outputs as CSV files, and the plot-ready report tables derived from them."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .fleet import FleetTrajectory, continuum_occupancy
from .grid import Grid, mode_pairs
from .io import read_csv, write_csv, write_json
from .scenarios import Scenario

SOC_BINS = np.linspace(0.2, 1.0, 21)
PASSAGE_BINS = 40
N_SAMPLED_PATHS = 20


# --------------------------------------------------------------------------
# fields


def _field_columns(arr, grid: Grid, labels):
    """Long format: one row per (time, label, cell)."""
    n_k, n_lab, n_h = arr.shape
    k, q, l = np.meshgrid(np.arange(n_k), np.arange(n_lab), np.arange(n_h), indexing="ij")
    cols = [grid.times[k.ravel()]]
    cols += [np.asarray(lab)[q.ravel()] for lab in labels]
    cols += [grid.centers[l.ravel()], arr.ravel()]
    return cols


def write_density(path, m, grid: Grid):
    write_csv(path, ["time_s", "mode", "soc_center", "density_per_soc"],
              _field_columns(m, grid, [np.arange(m.shape[1])]))


def write_pair_field(path, arr, grid: Grid, value_name: str):
    pairs = mode_pairs(int(round((1 + np.sqrt(1 + 4 * arr.shape[1])) / 2)))
    src = np.array([i for i, _ in pairs])
    dst = np.array([j for _, j in pairs])
    write_csv(path, ["time_s", "source_mode", "dest_mode", "soc_center", value_name],
              _field_columns(arr, grid, [src, dst]))


def read_field(path, shape) -> np.ndarray:
    _, data = read_csv(path)
    if data.shape[0] != int(np.prod(shape)):
        raise ValueError(f"{path}: {data.shape[0]} rows, expected {int(np.prod(shape))}")
    return data[:, -1].reshape(shape)


def write_diagnostics(path, diag):
    n = diag.iterations
    write_csv(path, ["iteration", "objective", "max_violation", "step_residual_primal", "step_residual_dual"],
              [np.arange(1, n + 1), np.array(diag.objective), np.array(diag.max_violation),
               np.array(diag.primal_residual), np.array(diag.dual_residual)])


# --------------------------------------------------------------------------
# fleet outputs


def write_fleet(out: Path, traj: FleetTrajectory, n_modes: int) -> list[str]:
    write_csv(out / "headcounts.csv", ["time_s"] + [f"mode_{i}_vehicles" for i in range(n_modes)],
              [traj.times] + [traj.headcounts[:, i] for i in range(n_modes)])
    width = len(str(max(traj.n - 1, 0)))
    write_csv(out / "soc_paths.csv", ["time_s"] + [f"soc_vehicle_{z:0{width}d}" for z in range(traj.n)],
              [traj.times] + [traj.soc[:, z] for z in range(traj.n)])
    t = traj.transfers
    write_csv(out / "transfers.csv", ["step", "time_s", "vehicle", "source_mode", "dest_mode", "soc"],
              [np.array([r.step for r in t], dtype=int), np.array([r.time for r in t], dtype=float),
               np.array([r.vehicle for r in t], dtype=int), np.array([r.source for r in t], dtype=int),
               np.array([r.dest for r in t], dtype=int), np.array([r.soc for r in t], dtype=float)])
    return ["headcounts.csv", "soc_paths.csv", "transfers.csv"]


# --------------------------------------------------------------------------
# report tables


def soc_bin_masses(m_row: np.ndarray, grid: Grid, edges: np.ndarray) -> np.ndarray:
    """Continuum mass per SoC bin from cell densities ``(n_modes, n_h)``."""
    lo, hi = grid.half_points[:-1], grid.half_points[1:]
    ov = np.clip(np.minimum(hi[None], edges[1:, None]) - np.maximum(lo[None], edges[:-1, None]), 0, None)
    return ov @ m_row.sum(axis=0)


def clipped_histogram(values, edges) -> np.ndarray:
    """Counts with out-of-range values folded into the end bins, so they sum to ``len(values)``."""
    v = np.clip(np.asarray(values, float), edges[0], edges[-1])
    return np.histogram(v, bins=edges)[0]


def build_report(run_dir: Path, scenario: Scenario, m: np.ndarray, fleet: dict | None, threshold: float) -> dict:
    """All report tables as ``{file name: (header, columns)}``."""
    g = scenario.grid
    tables = {}
    nan_t = np.full(g.n_t + 1, np.nan)
    cont = [continuum_occupancy(m, g, g.times, i) for i in range(m.shape[1])]
    if fleet is not None:
        times, heads, soc = fleet["times"], fleet["headcounts"], fleet["soc"]
        n = soc.shape[1]
        occ_t = times
        emp = [heads[:, i] / n for i in range(heads.shape[1])]
        cont_t = [continuum_occupancy(m, g, times, i) for i in range(m.shape[1])]
    else:
        occ_t, emp, cont_t, soc, n = g.times, [nan_t] * m.shape[1], cont, None, 0
    tables["occupancy.csv"] = (
        ["time_s"] + [f"continuum_mode_{i}_fraction" for i in range(len(cont_t))]
        + [f"empirical_mode_{i}_fraction" for i in range(len(emp))],
        [occ_t] + cont_t + emp)

    # occupancy billed for step k is the mode mass at its start, as in the energy cost
    steps = g.times[:-1]
    at_start = np.minimum(np.searchsorted(occ_t, steps + 1e-9, side="right") - 1, len(occ_t) - 1)
    charging_cont = cont[1][:-1]
    charging_emp = emp[1][at_start] if fleet is not None else np.full(g.n_t, np.nan)
    price = scenario.signals.get("price")
    tables["price_overlay.csv"] = (
        ["step_start_s", "price_eur_per_kwh", "continuum_charging_fraction", "empirical_charging_fraction"],
        [steps, price.samples if price is not None else np.full(g.n_t, np.nan), charging_cont, charging_emp])

    init_cnt = clipped_histogram(soc[0], SOC_BINS) if soc is not None else np.zeros(20, dtype=int)
    final_cnt = clipped_histogram(soc[-1], SOC_BINS) if soc is not None else np.zeros(20, dtype=int)
    tables["soc_histograms.csv"] = (
        ["soc_lo", "soc_hi", "initial_vehicles", "final_vehicles", "continuum_initial_mass", "continuum_final_mass"],
        [SOC_BINS[:-1], SOC_BINS[1:], init_cnt, final_cnt, soc_bin_masses(m[0], g, SOC_BINS),
         soc_bin_masses(m[-1], g, SOC_BINS)])

    t_edges = np.linspace(0.0, g.horizon, PASSAGE_BINS + 1)
    if soc is not None:
        reached = soc >= threshold - 1e-12
        hit = reached.any(axis=0)
        first = fleet["times"][np.argmax(reached, axis=0)][hit]
        counts = np.histogram(first, bins=t_edges)[0]
    else:
        counts = np.zeros(PASSAGE_BINS, dtype=int)
    tables["first_passage.csv"] = (["time_lo_s", "time_hi_s", f"vehicles_reaching_soc_{threshold:g}"],
                                   [t_edges[:-1], t_edges[1:], counts])

    if soc is not None:
        pick = np.unique(np.linspace(0, n - 1, min(N_SAMPLED_PATHS, n)).round().astype(int))
        tables["soc_trajectories.csv"] = (["time_s"] + [f"soc_vehicle_{z}" for z in pick],
                                          [fleet["times"]] + [soc[:, z] for z in pick])
    else:
        tables["soc_trajectories.csv"] = (["time_s"], [g.times])

    sig = scenario.signals
    nan_s = np.full(g.n_t, np.nan)
    tables["tracking.csv"] = (
        ["step_start_s", "u_pred_fraction", "u_tar_fraction", "u_cont_fraction", "u_emp_fraction"],
        [steps, sig["u_pred"].samples if "u_pred" in sig else nan_s,
         sig["u_tar"].samples if "u_tar" in sig else nan_s, cont[1][:-1], charging_emp])
    return tables


def write_report(out: Path, tables: dict) -> list[str]:
    out.mkdir(parents=True, exist_ok=True)
    for name, (header, cols) in tables.items():
        write_csv(out / name, header, cols)
    return sorted(tables)


def load_fleet_outputs(run_dir: Path):
    run_dir = Path(run_dir)
    if not (run_dir / "headcounts.csv").exists():
        return None
    _, heads = read_csv(run_dir / "headcounts.csv")
    _, paths = read_csv(run_dir / "soc_paths.csv")
    return {"times": heads[:, 0], "headcounts": heads[:, 1:].astype(int), "soc": paths[:, 1:]}


def load_manifest(run_dir: Path) -> dict:
    return json.loads((Path(run_dir) / "manifest.json").read_text())


def update_manifest(run_dir: Path, section: str, info: dict):
    man = load_manifest(run_dir)
    man[section] = info
    files = set(man.get("files", []))
    files.update(info.get("files", []))
    man["files"] = sorted(files)
    write_json(Path(run_dir) / "manifest.json", man)
