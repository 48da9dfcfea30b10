"""Smallest achievable terminal low-SoC mass for a scenario, by linear programming.

The LP keeps every hard constraint of the discretized problem (scheme,
transfer capacity, mode-mass bounds) and minimizes the terminal mass in the
cells counted as below ``s_min``. If its optimum exceeds ``epsilon``, the
scenario is infeasible and no solver can meet the terminal requirement.
A second, solver-free bound is printed: mass that starts below
``s_min - max_rate * horizon`` cannot reach ``s_min`` even when charging
throughout.

    python scripts/feasibility_check.py --scenario case1
    python scripts/feasibility_check.py --scenario case1 --set s_min=0.45 --set epsilon=0.05
"""

from __future__ import annotations

import argparse
import json

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from mfcharge.scenarios import load_scenario, with_overrides
from mfcharge.solver import build_saddle_problem


def min_terminal_low_mass(scenario) -> dict:
    pr = build_saddle_problem(scenario, objective_scale=1.0)
    g, lay, rows = pr.grid, pr.layout, pr.rows
    n = lay.size
    # transfer capacity: ratio * sum_out F - m <= 0 per (k, i, l)
    cap_r, cap_c, cap_v = [], [], []
    r = 0
    for k in range(g.n_t):
        for i, ps in enumerate(pr.out_pairs):
            for l in range(g.n_h):
                cap_r.append(r), cap_c.append(lay.m_index(k, i, l)), cap_v.append(-1.0)
                for p in ps:
                    cap_r.append(r), cap_c.append(lay.e_index(k, p, l)), cap_v.append(pr.ratio)
                r += 1
    cap = sp.csr_matrix((cap_v, (cap_r, cap_c)), shape=(r, n))
    inter = np.flatnonzero((rows.kind == 0) & np.array([lab != "terminal_soc" for lab in rows.labels]))
    box = rows.matrix[inter]
    a_ub = sp.vstack([cap, box, -box]).tocsr()
    b_ub = np.concatenate([np.zeros(r), rows.hi[inter], -rows.lo[inter]])
    finite = np.isfinite(b_ub)
    term = [q for q, lab in enumerate(rows.labels) if lab == "terminal_soc"]
    if not term:
        raise SystemExit("scenario has no terminal SoC requirement")
    c = np.asarray(rows.matrix[term[0]].todense()).ravel()
    bounds = [(None, None)] * lay.n_m + [(0, None)] * lay.n_e
    res = linprog(c, A_ub=a_ub[finite], b_ub=b_ub[finite], A_eq=pr.c_matrix, b_eq=pr.c_target, bounds=bounds,
                  method="highs")
    if res.status != 0:
        return {"status": res.message}
    return {"min_terminal_low_mass": float(res.fun), "epsilon": scenario.constraints.epsilon,
            "feasible": bool(res.fun <= scenario.constraints.epsilon + 1e-9)}


def unreachable_mass(scenario) -> float:
    g = scenario.grid
    reach = max(m.max_rate for m in scenario.modes) * g.horizon
    start_max = scenario.constraints.s_min - reach
    return float(np.sum(scenario.initial[:, g.half_points[1:] <= start_max + 1e-12]) * g.h)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", default="case1")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="scenario override")
    args = ap.parse_args(argv)
    sc = load_scenario(args.scenario)
    if args.set:
        sc = with_overrides(sc, **{k: float(v) for k, v in (s.split("=", 1) for s in args.set)})
    out = min_terminal_low_mass(sc)
    out["mass_out_of_reach"] = unreachable_mass(sc)
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
