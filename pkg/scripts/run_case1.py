"""Peak/off-peak pricing case: solve, deploy on a finite fleet, write the report tables.

    python scripts/run_case1.py --out runs/case1 [--sweep 100 500 5000]

``--sweep`` redeploys the same control on several fleet sizes and prints
the share of vehicles ending below the SoC floor for each.
"""

import argparse
import json
from pathlib import Path

from mfcharge.cli import main as cli
from mfcharge.fleet import continuum_occupancy, fleet_stats, interpolate_control, sample_initial_fleet, simulate
from mfcharge.grid import layout_for
from mfcharge.reporting import read_field
from mfcharge.scenarios import load_scenario


def sweep(run: Path, scenario, sizes):
    g = scenario.grid
    lay = layout_for(g, len(scenario.modes))
    alpha = read_field(run / "alpha.csv", lay.e_shape)
    m = read_field(run / "m.csv", lay.m_shape)
    a = interpolate_control(alpha, g, scenario.deployment)
    for n in sizes:
        traj = simulate(sample_initial_fleet(scenario.initial, g, n), a, scenario.deployment, scenario.constraints,
                        scenario.modes, g)
        st = fleet_stats(traj, scenario.constraints.s_min, continuum_occupancy(m, g, traj.times, 1))
        print(f"n={n:6d}  below s_min={st.fraction_below:.3f}  transfers/vehicle={st.total_transfers / n:.3f}  "
              f"occupancy sup-distance={st.sup_distance:.4f}  mesh condition={traj.mesh_condition:.3g}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", default="case1")
    ap.add_argument("--out", type=Path, default=Path("runs/case1"))
    ap.add_argument("--n", type=int)
    ap.add_argument("--sweep", type=int, nargs="*")
    args = ap.parse_args()
    code = cli(["solve", "--scenario", args.scenario, "--out", str(args.out)])
    print(f"solve exit code {code}")
    cli(["simulate", "--run", str(args.out)] + (["--n", str(args.n)] if args.n else []))
    cli(["report", "--run", str(args.out)])
    print(json.dumps(json.loads((args.out / "stats.json").read_text()), indent=2))
    if args.sweep:
        sweep(args.out, load_scenario(args.scenario), args.sweep)
