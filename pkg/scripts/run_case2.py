"""Signal tracking case: solve, deploy on 1000 vehicles, compare tracking errors.

    python scripts/run_case2.py --out runs/case2
"""

import argparse
import json
from pathlib import Path

import numpy as np

from mfcharge.cli import main as cli
from mfcharge.io import read_csv

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", default="case2")
    ap.add_argument("--out", type=Path, default=Path("runs/case2"))
    args = ap.parse_args()
    code = cli(["solve", "--scenario", args.scenario, "--out", str(args.out)])
    print(f"solve exit code {code}")
    cli(["simulate", "--run", str(args.out)])
    cli(["report", "--run", str(args.out), "--threshold", "0.6"])
    hdr, tab = read_csv(args.out / "report" / "tracking.csv")
    col = {name: tab[:, q] for q, name in enumerate(hdr)}
    rmse = lambda u: float(np.sqrt(np.mean((u - col["u_tar_fraction"]) ** 2)))  # noqa: E731
    print(f"RMSE to target: nominal {rmse(col['u_pred_fraction']):.4f}  continuum {rmse(col['u_cont_fraction']):.4f}  "
          f"fleet {rmse(col['u_emp_fraction']):.4f}")
    stats = json.loads((args.out / "stats.json").read_text())
    print(f"mean transfers per vehicle {stats['mean_transfers_per_vehicle']:.3f}, "
          f"below SoC 0.6 at T {stats['fraction_below_threshold']:.3f}")
