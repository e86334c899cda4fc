import json
import subprocess
import sys

import numpy as np
import pytest

from chpfreq.analysis import read_trajectory_csv
from chpfreq.cli import EXIT_AUDIT, EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, main, read_metadata
from chpfreq.fixtures import fixture_path


def doc(name="f1_mode1"):
    with fixture_path(name).open() as fh:
        return json.load(fh)


def write_doc(path, d):
    path.write_text(json.dumps(d))
    return path


@pytest.fixture(scope="module")
def f1_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("f1_mode1")
    assert main(["simulate", "f1_mode1", "--out", str(out)]) == EXIT_OK
    return out


def test_validate_fixture(capsys):
    assert main(["validate", "f1_mode1"]) == EXIT_OK
    assert "ok" in capsys.readouterr().out


def test_validate_reports_imbalance(tmp_path, capsys):
    d = doc()
    d["system"]["areas"][0]["edges"][1]["flow"] = 2
    assert main(["validate", str(write_doc(tmp_path / "bad.json", d))]) == EXIT_VALIDATION
    assert "flow-conservation" in capsys.readouterr().out


def test_schema_error_exit_code(tmp_path, capsys):
    d = doc()
    del d["system"]["areas"][0]["edges"][0]["flow"]
    assert main(["simulate", str(write_doc(tmp_path / "bad.json", d)), "--out", str(tmp_path)]) == EXIT_VALIDATION
    assert "system.areas[0].edges[0].flow" in capsys.readouterr().err


def test_usage_errors(tmp_path, capsys):
    assert main(["simulate", str(tmp_path / "missing.json")]) == EXIT_USAGE
    assert main(["simulate", "f1_mode1", "--matched-mode1", "--out", str(tmp_path)]) == EXIT_USAGE
    with pytest.raises(SystemExit) as ei:
        main(["no-such-command"])
    assert ei.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as ei:
        main([])
    assert ei.value.code == EXIT_USAGE


def test_simulate_final_frequency(f1_run):
    tab = read_trajectory_csv(f1_run / "trajectory.csv")
    assert tab["omega_bus1"][-1] == pytest.approx(-0.1, abs=1e-5)
    assert tab["Tbar_area1"][-1] == pytest.approx(-0.3, abs=1e-5)
    assert tab.t[-1] == pytest.approx(200.0)
    assert tab.columns[0] == "t" and tab.columns[-1] == "flag_security"
    for c in ("pG_bus1", "pP_e1", "hP_e1", "hG_e2", "TE_e1", "TN_n1"):
        assert c in tab.columns


def test_metadata_contents(f1_run):
    meta = read_metadata(f1_run / "metadata.txt")
    assert meta["name"] == "f1_mode1"
    assert json.loads(meta["last_disturbance"]) == 1.0
    assert json.loads(meta["run.decimation"]) == 10
    for key in ("numpy", "scipy", "python", "config_json"):
        assert key in meta


def test_rerun_from_metadata_is_byte_identical(f1_run, tmp_path):
    assert main(["simulate", str(f1_run / "metadata.txt"), "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "trajectory.csv").read_bytes() == (f1_run / "trajectory.csv").read_bytes()


def test_mode2_stop_at_steady(tmp_path):
    assert main(["simulate", "f1_mode2", "--stop-at-steady", "--out", str(tmp_path)]) == EXIT_OK
    tab = read_trajectory_csv(tmp_path / "trajectory.csv")
    assert tab["Tbar_area1"][-1] == pytest.approx(-6 / 35, abs=1e-5)
    assert tab["omega_bus1"][-1] == pytest.approx(-6 / 35, abs=1e-5)
    assert tab.t[-1] < 1000.0
    meta = read_metadata(tmp_path / "metadata.txt")
    assert json.loads(meta["run.stop_at_steady"]) is True


def test_zero_disturbance_columns_are_zero(tmp_path):
    d = doc()
    d["disturbances"] = []
    d["sim"]["t_end"] = 5
    path = write_doc(tmp_path / "zero.json", d)
    assert main(["simulate", str(path), "--out", str(tmp_path / "run")]) == EXIT_OK
    tab = read_trajectory_csv(tmp_path / "run" / "trajectory.csv")
    assert np.all(tab.data[:, 1:] == 0.0)


def test_decimation_keeps_last_row(tmp_path):
    d = doc()
    d["sim"]["t_end"] = 1.05
    path = write_doc(tmp_path / "short.json", d)
    assert main(["simulate", str(path), "--out", str(tmp_path / "run"), "--decimation", "50"]) == EXIT_OK
    tab = read_trajectory_csv(tmp_path / "run" / "trajectory.csv")
    assert list(tab.t) == pytest.approx([0.0, 0.5, 1.0, 1.05])


def test_equilibrium_output(capsys, tmp_path):
    assert main(["equilibrium", "f1_mode2", "--csv", str(tmp_path / "eq.csv")]) == EXIT_OK
    out = capsys.readouterr().out
    rows = dict(line.split() for line in out.splitlines()[1:])
    assert float(rows["omega"]) == pytest.approx(-6 / 35, abs=1e-12)
    assert float(rows["lam"]) == pytest.approx(-6 / 35, abs=1e-10)
    assert float(rows["mu_area1"]) == pytest.approx(-2 / 35, abs=1e-10)
    assert float(rows["check_qp_gap"]) < 1e-10
    assert float(rows["check_qp_numeric_gap"]) < 1e-8
    assert (tmp_path / "eq.csv").read_text().startswith("quantity,value\n")


def test_equilibrium_matched_mode1(capsys):
    assert main(["equilibrium", "f39_analog_mode2", "--matched-mode1"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.startswith("mode 1")
    rows = dict(line.split() for line in out.splitlines()[1:])
    assert float(rows["omega"]) == pytest.approx(-0.0765306122, abs=1e-9)


def test_audit_pass_and_negated_damping(capsys):
    assert main(["audit", "f1_mode1"]) == EXIT_OK
    assert "v1e" in capsys.readouterr().out
    assert main(["audit", "f1_mode1", "--negate-damping"]) == EXIT_AUDIT
    out = capsys.readouterr().out
    assert "FAIL" in out and "first violation at t=" in out


def test_analyze(f1_run, capsys):
    assert main(["analyze", str(f1_run / "trajectory.csv")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "after t = 1" in out
    assert "omega_bus1" in out and "cost-implied" in out


def test_analyze_bad_csv(tmp_path, capsys):
    p = tmp_path / "trajectory.csv"
    p.write_text("t,a\n0\n")
    assert main(["analyze", str(p)]) == EXIT_VALIDATION
    assert main(["analyze", str(tmp_path / "none.csv")]) == EXIT_USAGE


def test_batch(tmp_path, capsys):
    src = tmp_path / "scenarios"
    src.mkdir()
    for k, delta in enumerate((0.2, -0.2)):
        d = doc()
        d["disturbances"][0]["delta"] = delta
        d["sim"]["t_end"] = 3
        write_doc(src / f"s{k}.json", d)
    assert main(["batch", str(src), "--out", str(tmp_path / "runs"), "--jobs", "2"]) == EXIT_OK
    for k in range(2):
        assert (tmp_path / "runs" / f"s{k}" / "trajectory.csv").exists()
    assert main(["batch", str(tmp_path / "nope")]) == EXIT_USAGE


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "chpfreq", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("chpfreq ")
