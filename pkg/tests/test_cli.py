import csv
import json
import subprocess
import sys

import pytest

from ssctm import bundled_config_path
from ssctm import cli


def run(args, tmp_path, name="out"):
    out = tmp_path / name
    return cli.main(args + ["--out-dir", str(out)]), out


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_simulate_writes_outputs_and_manifest(tmp_path):
    code, out = run(["simulate", "--config", "twocell", "--horizon-steps", "100"], tmp_path)
    assert code == 0
    rows = read_csv(out / "trajectory.csv")
    assert len(rows) == 100 and rows[0]["step"] == "1"
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == "simulate" and man["status"] == "ok"
    assert set(man["files"]) == {"trajectory.csv", "metrics.csv"}
    assert man["seeds"]["seed"] == 0


def test_config_path_and_seed_override(tmp_path):
    path = str(bundled_config_path("twocell"))
    code, out = run(["simulate", "--config", path, "--horizon-steps", "10", "--seed", "9"], tmp_path)
    assert code == 0
    assert json.loads((out / "manifest.json").read_text())["seeds"]["seed"] == 9


def test_drift_report(tmp_path):
    code, out = run(["drift", "--config", "twocell", "--scheme", "localized"], tmp_path)
    assert code == 0
    text = (out / "drift.txt").read_text()
    assert "Stable" in text
    rows = read_csv(out / "drift.csv")
    assert {r["buffer"] for r in rows} == {"1", "2"}


def test_design_local_small_grid(tmp_path):
    code, out = run(["design", "--config", "twocell", "--mode", "local", "--grid-u", "4500,5000,250",
                     "--grid-kappa", "20,30,5"], tmp_path)
    assert code == 0
    (row,) = read_csv(out / "design.csv")
    assert row["ramp"] == "2"


def test_design_infeasible_exit_code(tmp_path):
    text = bundled_config_path("twocell").read_text().replace("[3500.0, 600.0]", "[3900.0, 600.0]")
    cfg = tmp_path / "heavy.cfg"
    cfg.write_text(text)
    code, out = run(["design", "--config", str(cfg), "--mode", "local", "--grid-u", "4500,5000,250",
                     "--grid-kappa", "20,30,5"], tmp_path)
    assert code == 3
    assert json.loads((out / "manifest.json").read_text())["status"] == "infeasible"


def test_design_throughput_mode(tmp_path):
    text = bundled_config_path("twocell").read_text().replace("[3500.0, 600.0]", "[3900.0, 600.0]")
    cfg = tmp_path / "heavy.cfg"
    cfg.write_text(text)
    code, out = run(["design", "--config", str(cfg), "--mode", "local-throughput", "--grid-u", "2500,5000,500",
                     "--grid-kappa", "0,30,10"], tmp_path)
    assert code == 0
    summary = {r["key"]: r["value"] for r in read_csv(out / "summary.csv")}
    assert float(summary["alpha_tilde_1"]) < 3900


def test_invalid_input_exit_code(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[highway]\nlength_km = [1.0]\n")
    assert run(["simulate", "--config", str(bad)], tmp_path)[0] == 2
    assert run(["design", "--config", "twocell", "--mode", "local", "--grid-u", "1,2"], tmp_path)[0] == 2


def test_scale_limit_exit_code(tmp_path, i210_bundle):
    assert run(["design", "--config", "i210", "--mode", "full", "--grid-u", "5000,5000,1",
                "--grid-kappa", "25,25,1"], tmp_path)[0] == 4


def test_compare_outputs(tmp_path):
    code, out = run(["compare", "--config", "twocell", "--strategies", "none,policy,alinea",
                     "--horizon-steps", "720", "--replications", "3"], tmp_path)
    assert code == 0
    rows = read_csv(out / "comparison.csv")
    assert {r["strategy"] for r in rows} == {"none", "policy", "alinea"}
    tests = read_csv(out / "tests.csv")
    assert {(r["strategy"], r["metric"]) for r in tests} >= {("policy", "vht"), ("alinea", "queue")}


def test_unknown_strategy(tmp_path):
    assert run(["compare", "--config", "twocell", "--strategies", "none,bogus", "--horizon-steps", "10"],
               tmp_path)[0] == 2


def test_density_map(tmp_path):
    code, out = run(["export-density-map", "--config", "twocell", "--horizon-steps", "720",
                     "--bin-minutes", "30"], tmp_path)
    assert code == 0
    files = json.loads((out / "manifest.json").read_text())["files"]
    (name,) = [f for f in files if f.endswith(".csv")]
    rows = read_csv(out / name)
    assert len(rows) == 2 and len(rows[0]) == 1 + 4


def test_replay_detects_tampering(tmp_path):
    code, out = run(["simulate", "--config", "twocell", "--horizon-steps", "50"], tmp_path)
    ok, bad = cli.replay(out / "manifest.json", str(tmp_path / "r1"))
    assert ok and not bad
    man = json.loads((out / "manifest.json").read_text())
    man["files"]["metrics.csv"]["sha256"] = "0" * 64
    (out / "manifest.json").write_text(json.dumps(man))
    ok, bad = cli.replay(out / "manifest.json", str(tmp_path / "r2"))
    assert not ok and list(bad) == ["metrics.csv"]


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "ssctm.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("ssctm ")
