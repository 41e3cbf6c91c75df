import csv
import json
import subprocess
import sys
from importlib import resources

import pytest

from nuise.sim.cli import main
from nuise.sim.logio import estimate_columns, read_log

SMALL = """\
format_version: 1
robot: khepera
noise:
  Q: [1.0e-7, 1.0e-7, 1.0e-7]
  R:
    ips: [1.0e-6, 1.0e-6, 1.0e-6]
    encoder: [1.0e-6, 1.0e-6, 1.0e-6]
    lidar: [4.0e-6, 4.0e-6, 4.0e-6, 4.0e-6, 1.0e-6]
initial_pose: [0.0, -0.1, 0.0]
controller:
  schedule:
    - {steps: 30, u: [0.04, 0.06]}
injections:
  - {kind: actuator, magnitude: [0.05, -0.05], start_step: 10, end_step: 20}
steps: 30
trials: 2
seed: 5
"""


@pytest.fixture
def small_config(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(SMALL)
    return p


def test_simulate_bundled_config_writes_logs_and_report(tmp_path, capsys):
    cfg = resources.files("nuise") / "data" / "khepera_circle.yaml"
    out = tmp_path / "run"
    assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
    logs = sorted(out.glob("trial_*.csv"))
    assert len(logs) == 5
    report = json.loads((out / "report.json").read_text())
    assert report["format_version"] == 1
    assert report["seeds"] == [1, 2, 3, 4, 5]
    assert "detection rate" in capsys.readouterr().out


def test_estimate_reproduces_simulation_bit_exactly(tmp_path, small_config):
    out = tmp_path / "run"
    assert main(["simulate", "--config", str(small_config), "--out", str(out)]) == 0
    log = out / "trial_0001.csv"
    replayed = tmp_path / "replay.csv"
    code = main(["estimate", "--log", str(log), "--config", str(small_config), "--out", str(replayed), "--check"])
    assert code == 0
    cols, rec = read_log(log)
    _, new = read_log(replayed)
    mode_ids = [c[3:] for c in cols if c.startswith("mu_")]
    for col in estimate_columns(mode_ids, ("ips", "encoder", "lidar")):
        assert [r[col] for r in rec] == [r[col] for r in new]
    assert all(r["true_x"] == "nan" for r in new)


def test_estimate_to_stdout(tmp_path, small_config, capsys):
    out = tmp_path / "run"
    main(["simulate", "--config", str(small_config), "--out", str(out)])
    capsys.readouterr()
    assert main(["estimate", "--log", str(out / "trial_0000.csv"), "--config", str(small_config)]) == 0
    rows = list(csv.reader(capsys.readouterr().out.splitlines()))
    assert rows[0][0] == "step" and len(rows) == 32


def test_estimate_detects_tampered_log(tmp_path, small_config, capsys):
    out = tmp_path / "run"
    main(["simulate", "--config", str(small_config), "--out", str(out)])
    log = out / "trial_0000.csv"
    lines = log.read_text().splitlines()
    header = lines[1].split(",")
    i = header.index("xhat_x")
    fields = lines[5].split(",")
    fields[i] = repr(float(fields[i]) + 1e-9)
    lines[5] = ",".join(fields)
    log.write_text("\n".join(lines) + "\n")
    assert main(["estimate", "--log", str(log), "--config", str(small_config), "--out", str(tmp_path / "r.csv"),
                 "--check"]) == 2


def test_estimate_rejects_mismatched_config(tmp_path, small_config):
    out = tmp_path / "run"
    main(["simulate", "--config", str(small_config), "--out", str(out)])
    other = tmp_path / "other.yaml"
    other.write_text(SMALL.replace("robot: khepera", "robot: khepera\nsensors: [ips, lidar]"))
    assert main(["estimate", "--log", str(out / "trial_0000.csv"), "--config", str(other)]) == 1


def test_report_writes_tables_and_series(tmp_path, small_config, capsys):
    out = tmp_path / "run"
    main(["simulate", "--config", str(small_config), "--out", str(out)])
    capsys.readouterr()
    assert main(["report", "--in", str(out)]) == 0
    text = capsys.readouterr().out
    assert "false-positive rate" in text and "mode identification" in text
    rows = list(csv.reader((out / "series.csv").read_text().splitlines()))
    assert rows[0][:2] == ["step", "trials"]
    assert len(rows) == 31


def test_report_on_empty_directory_exits_1(tmp_path, capsys):
    assert main(["report", "--in", str(tmp_path)]) == 1
    assert "no trial logs" in capsys.readouterr().err


def test_malformed_config_exits_1_with_line(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(SMALL.replace("steps: 30\ntrials", "steps: zero\ntrials"))
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert f"{bad}:15:" in capsys.readouterr().err


def test_all_trials_aborted_exits_2(tmp_path, capsys):
    cfg = tmp_path / "crash.yaml"
    cfg.write_text(SMALL.replace("u: [0.04, 0.06]", "u: [0.5, 0.5]"))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "aborted" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "nuise", "report", "--in", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 1
