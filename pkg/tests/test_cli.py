import json
import subprocess
import sys

import numpy as np
import pytest

from mfcharge.cli import main
from mfcharge.io import read_csv

SOLVE_FILES = {"m.csv", "e.csv", "alpha.csv", "diagnostics.csv", "scenario.json"}


def _small_scenario(tmp_path, **overrides):
    f = tmp_path / "small.json"
    f.write_text(json.dumps({"base": "case1", "overrides": {"n": 40, **overrides}}))
    return str(f)


@pytest.fixture(scope="module")
def solved(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    run = root / "run"
    code = main(["solve", "--scenario", _small_scenario(root), "--out", str(run), "--max-iter", "10", "--seed", "7"])
    return run, code


def test_solve_outputs(solved):
    run, code = solved
    assert code == 2  # ten iterations are far from feasible
    names = {p.name for p in run.iterdir()}
    assert SOLVE_FILES | {"manifest.json"} <= names
    header, diag = read_csv(run / "diagnostics.csv")
    assert diag.shape[0] == 10
    assert header[0] == "iteration"
    man = json.loads((run / "manifest.json").read_text())
    assert man["iterations"] == 10
    assert all((run / f).exists() for f in man["files"])
    for key in ("scenario_hash", "solver_params", "wall_time_s", "software_version", "objective_scale"):
        assert key in man
    _, m = read_csv(run / "m.csv")
    assert m.shape == (41 * 2 * 20, 4)


def test_csv_number_format(solved):
    run, _ = solved
    line = (run / "m.csv").read_text().splitlines()[1]
    value = line.split(",")[-1]
    mantissa = value.split("e")[0].lstrip("-")
    assert len(mantissa.replace(".", "")) == 12


def test_malformed_config_leaves_nothing(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"base": "case1", "overrides": {"n": ')
    out = tmp_path / "out"
    assert main(["solve", "--scenario", str(bad), "--out", str(out)]) == 1
    assert "error" in capsys.readouterr().err
    assert not out.exists()
    assert list(tmp_path.iterdir()) == [bad]


def test_usage_errors(tmp_path):
    assert main([]) == 1
    assert main(["solve", "--out", str(tmp_path / "x")]) == 1
    assert main(["simulate", "--run", str(tmp_path), "--interp", "cubic"]) == 1


def test_simulate_single_vehicle(solved, tmp_path):
    import shutil

    run = tmp_path / "run"
    shutil.copytree(solved[0], run)
    assert main(["simulate", "--run", str(run), "--n", "1"]) == 0
    _, heads = read_csv(run / "headcounts.csv")
    np.testing.assert_array_equal(heads[:, 1:].sum(axis=1), 1)
    stats = json.loads((run / "stats.json").read_text())
    assert stats["n"] == 1 and stats["mesh_warning"] is True
    man = json.loads((run / "manifest.json").read_text())
    assert {"headcounts.csv", "soc_paths.csv", "transfers.csv", "stats.json"} <= set(man["files"])


def test_simulate_missing_alpha(solved, tmp_path, capsys):
    import shutil

    run = tmp_path / "run"
    shutil.copytree(solved[0], run)
    (run / "alpha.csv").unlink()
    assert main(["simulate", "--run", str(run)]) == 1
    assert "alpha.csv" in capsys.readouterr().err


def test_check_slater_case1(capsys):
    assert main(["check-slater", "--scenario", "case1"]) == 0
    cert = json.loads(capsys.readouterr().out)
    assert cert["verified"] is False
    assert cert["epsilon_minus_e"] == pytest.approx(-0.01)
    assert cert["p"] == pytest.approx(0.2) and cert["tau"] == 10 and cert["rho"] == 4
    assert any("zero-rate" in u for u in cert["unmet"])


def test_check_slater_without_charging_room(tmp_path, capsys):
    f = _small_scenario(tmp_path, d_upper_1=0.005)
    assert main(["check-slater", "--scenario", f, "--e-margin", "0.01"]) == 0
    cert = json.loads(capsys.readouterr().out)
    assert cert["verified"] is False and "error" in cert


def test_report_and_reproducibility(solved, tmp_path):
    import shutil

    outs = []
    for rep in range(2):
        run = tmp_path / f"run{rep}"
        shutil.copytree(solved[0], run)
        assert main(["simulate", "--run", str(run), "--seed", "3"]) == 0
        assert main(["report", "--run", str(run)]) == 0
        outs.append(run)
    files = sorted(p.name for p in (outs[0] / "report").iterdir())
    assert files == ["first_passage.csv", "occupancy.csv", "price_overlay.csv", "soc_histograms.csv",
                     "soc_trajectories.csv", "tracking.csv"]
    for name in files + ["headcounts.csv", "soc_paths.csv", "transfers.csv"]:
        a = outs[0] / ("report/" + name if name in files else name)
        b = outs[1] / ("report/" + name if name in files else name)
        assert a.read_bytes() == b.read_bytes(), name
    hdr, hist = read_csv(outs[0] / "report" / "soc_histograms.csv")
    assert hist[:, hdr.index("initial_vehicles")].sum() == 40
    assert hist[:, hdr.index("final_vehicles")].sum() == 40
    assert hist.shape[0] == 20
    hdr, _ = read_csv(outs[0] / "report" / "first_passage.csv")
    assert len(read_csv(outs[0] / "report" / "first_passage.csv")[1]) == 40
    hdr, _ = read_csv(outs[0] / "report" / "tracking.csv")
    assert hdr[1:] == ["u_pred_fraction", "u_tar_fraction", "u_cont_fraction", "u_emp_fraction"]


def test_report_missing_run(tmp_path):
    assert main(["report", "--run", str(tmp_path / "nowhere")]) == 1


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "mfcharge.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip()
