"""Command-line entry point: ``mfcharge {solve,simulate,check-slater,report}``.

Exit codes: 0 success, 1 usage/parse/missing-input error, 2 the solve ended
with a constraint violation above ``INFEASIBLE_TOL`` (likely infeasible).
The log level is read from ``MFCHARGE_LOG`` (default ``WARNING``).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import MfChargeError
from .fleet import build_mesh, fleet_stats, interpolate_control, sample_initial_fleet, simulate, continuum_occupancy
from .grid import layout_for
from .io import StagedDir, write_json
from .reporting import (build_report, load_fleet_outputs, load_manifest, read_field, update_manifest, write_density,
                        write_diagnostics, write_fleet, write_pair_field, write_report)
from .scenarios import load_scenario, scenario_from_config, scenario_to_dict, with_overrides
from .solver import build_saddle_problem, extract_alpha, slater_certificate, solve

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE = 0, 1, 2
INFEASIBLE_TOL = 1e-3  # 0.1% of the fleet

log = logging.getLogger("mfcharge")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mfcharge", description="Mean-field charging control of an electric-vehicle fleet.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("solve", help="compute the optimal density and flows")
    s.add_argument("--scenario", required=True, help="case1, case2 or a scenario JSON file")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--max-iter", type=int)
    s.add_argument("--seed", type=int, help="recorded for the later deployment step")

    m = sub.add_parser("simulate", help="deploy a solved control on a finite fleet")
    m.add_argument("--run", "--out", dest="run", required=True, type=Path, help="directory written by solve")
    m.add_argument("--n", type=int)
    m.add_argument("--mesh-u", type=float)
    m.add_argument("--mesh-dr", type=float)
    m.add_argument("--seed", type=int, help="random FIFO tie-breaking (default: vehicle index)")
    m.add_argument("--interp", choices=["constant", "linear"], default="constant")

    c = sub.add_parser("check-slater", help="evaluate the binomial strong-duality certificate")
    c.add_argument("--scenario", required=True)
    c.add_argument("--e-margin", type=float, default=0.01)

    r = sub.add_parser("report", help="write plot-ready CSV tables for a run")
    r.add_argument("--run", "--out", dest="run", required=True, type=Path)
    r.add_argument("--threshold", type=float, help="SoC for first-passage times (default: scenario s_min or 0.7)")
    return p


# --------------------------------------------------------------------------


def cmd_solve(args) -> int:
    overrides = {}
    if args.max_iter is not None:
        overrides["max_iter"] = args.max_iter
    if args.seed is not None:
        overrides["seed"] = args.seed
    scenario = load_scenario(args.scenario)
    if overrides:
        scenario = with_overrides(scenario, **overrides)
    params = scenario.solver_params
    problem = build_saddle_problem(scenario, params)
    res = solve(problem, params, log_every=1000)
    diag = res.diagnostics
    alpha = extract_alpha(res.m, res.e)
    files = ["m.csv", "e.csv", "alpha.csv", "diagnostics.csv", "scenario.json"]
    with StagedDir(args.out) as tmp:
        g = scenario.grid
        write_density(tmp / "m.csv", res.m, g)
        write_pair_field(tmp / "e.csv", res.e, g, "flow_density_per_s")
        write_pair_field(tmp / "alpha.csv", alpha, g, "alpha_per_s")
        write_diagnostics(tmp / "diagnostics.csv", diag)
        write_json(tmp / "scenario.json", scenario_to_dict(scenario))
        write_json(tmp / "manifest.json", {
            "scenario_hash": scenario.digest(),
            "solver_params": dataclasses.asdict(params),
            "iterations": diag.iterations,
            "converged": diag.converged,
            "final_max_violation": diag.max_violation[-1] if diag.iterations else None,
            "final_objective": diag.objective[-1] if diag.iterations else None,
            "operator_norm_estimate": problem.opnorm,
            "objective_scale": problem.objective_scale,
            "wall_time_s": diag.wall_time,
            "files": files,
            "software_version": __version__,
        })
    viol = diag.max_violation[-1] if diag.iterations else problem.max_violation(res.state.y)
    print(f"iterations={diag.iterations} objective={diag.objective[-1] if diag.iterations else float('nan'):.10g} "
          f"max_violation={viol:.3e} converged={diag.converged}")
    if viol > INFEASIBLE_TOL:
        print(f"warning: constraint violation {viol:.3e} > {INFEASIBLE_TOL:g}; the problem is likely infeasible",
              file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


def _run_scenario(run: Path):
    for name in ("scenario.json", "alpha.csv", "m.csv", "manifest.json"):
        if not (run / name).exists():
            raise FileNotFoundError(f"missing {run / name}")
    doc = json.loads((run / "scenario.json").read_text())
    return scenario_from_config(doc["config"])


def cmd_simulate(args) -> int:
    run = args.run
    scenario = _run_scenario(run)
    g = scenario.grid
    lay = layout_for(g, len(scenario.modes))
    alpha = read_field(run / "alpha.csv", lay.e_shape)
    m = read_field(run / "m.csv", lay.m_shape)
    mesh = build_mesh(args.mesh_u or scenario.deployment.u, args.mesh_dr or scenario.deployment.dr)
    n = args.n or scenario.n_vehicles
    seed = args.seed if args.seed is not None else scenario.seed
    a = interpolate_control(alpha, g, mesh, kind=args.interp)
    fleet0 = sample_initial_fleet(scenario.initial, g, n, seed)
    traj = simulate(fleet0, a, mesh, scenario.constraints, scenario.modes, g)
    threshold = scenario.constraints.s_min if scenario.constraints.s_min is not None else 0.6
    stats = fleet_stats(traj, threshold, continuum_occupancy(m, g, traj.times, 1), mode=1)
    files = write_fleet(run, traj, len(scenario.modes))
    summary = stats.summary() | {"mesh": dataclasses.asdict(mesh), "seed": seed, "interp": args.interp}
    write_json(run / "stats.json", summary)
    files.append("stats.json")
    update_manifest(run, "simulate", {"n": n, "files": files})
    print(json.dumps({k: summary[k] for k in ("n", "total_transfers", "mean_transfers_per_vehicle",
                                              "fraction_below_threshold", "mesh_condition", "mesh_warning")}))
    if summary["mesh_warning"]:
        print(f"warning: mesh condition value {summary['mesh_condition']:.4g} is not small", file=sys.stderr)
    return EXIT_OK


def cmd_check_slater(args) -> int:
    scenario = load_scenario(args.scenario)
    try:
        cert = slater_certificate(scenario, args.e_margin).as_dict()
    except MfChargeError as exc:  # premise failures are reported, not fatal
        cert = {"verified": False, "error": str(exc)}
    print(json.dumps(cert, sort_keys=True))
    return EXIT_OK


def cmd_report(args) -> int:
    run = args.run
    scenario = _run_scenario(run)
    g = scenario.grid
    m = read_field(run / "m.csv", layout_for(g, len(scenario.modes)).m_shape)
    fleet = load_fleet_outputs(run)
    thr = args.threshold or scenario.constraints.s_min or 0.7
    files = write_report(run / "report", build_report(run, scenario, m, fleet, thr))
    update_manifest(run, "report", {"files": [f"report/{f}" for f in files]})
    print("\n".join(str(run / "report" / f) for f in files))
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "simulate": cmd_simulate, "check-slater": cmd_check_slater, "report": cmd_report}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("MFCHARGE_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (MfChargeError, FileNotFoundError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"mfcharge {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
