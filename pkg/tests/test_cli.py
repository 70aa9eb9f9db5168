import json

import numpy as np
import pytest
from click.testing import CliRunner

from wavectl.cli import main
from wavectl.runio import read_snapshot, sha256, write_snapshot


@pytest.fixture
def runner(tmp_path, monkeypatch):
    monkeypatch.setenv("WAVECTL_OUT", str(tmp_path))
    return CliRunner()


def invoke(runner, *args):
    return runner.invoke(main, list(args), catch_exceptions=False)


def manifest_ok(d):
    m = json.loads((d / "manifest.json").read_text())
    for rel, digest in m["files"].items():
        assert sha256(d / rel) == digest
    on_disk = {p.relative_to(d).as_posix() for p in d.rglob("*") if p.is_file()} - {"manifest.json"}
    assert set(m["files"]) == on_disk
    return m


def test_simulate_writes_energy_and_manifest(runner, tmp_path):
    r = invoke(runner, "simulate", "--scenario", "fig4a", "--grid", "0.06", "--T", "0.5")
    assert r.exit_code == 0, r.output
    d = tmp_path / "simulate_fig4a"
    lines = (d / "energy.csv").read_text().splitlines()
    assert lines[0] == "step,t,potential,kinetic,energy,rel_drift" and len(lines) > 2
    m = manifest_ok(d)
    assert m["exit_code"] == 0 and m["resolved"]["grid"]["spacing"] == 0.06
    assert any(k.startswith("snapshots/") for k in m["files"])


def test_simulate_is_deterministic(runner, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert invoke(runner, "simulate", "--scenario", "fig4a", "--grid", "0.06", "--T", "0.3",
                      "--out", str(d)).exit_code == 0
    assert (a / "energy.csv").read_bytes() == (b / "energy.csv").read_bytes()


def test_malformed_config_exits_2(runner, tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[grid]\nspacing = 0.1\nbox = [-2.0, 2.0, -2.0, 2.0]\nmeasurement_radius = 1.5\nfoo = 3\n")
    r = runner.invoke(main, ["simulate", "--scenario", str(bad)])
    assert r.exit_code == 2
    assert "grid.foo" in r.output


def test_cfl_violation_exits_3(runner, tmp_path):
    r = runner.invoke(main, ["simulate", "--scenario", "fig4a", "--grid", "0.06", "--dt", "0.1", "--T", "0.5"])
    assert r.exit_code == 3
    m = json.loads((tmp_path / "simulate_fig4a" / "manifest.json").read_text())
    assert m["exit_code"] == 3 and "CflViolation" in m["error"]


def test_control_on_trapping_geometry_exits_4(runner, tmp_path):
    r = runner.invoke(main, ["control", "--scenario", "two_disc"])
    assert r.exit_code == 4
    m = json.loads((tmp_path / "control_two_disc" / "manifest.json").read_text())
    assert "NotAContraction" in m["error"]


def test_control_then_verify(runner, tmp_path):
    r = invoke(runner, "control", "--scenario", "fig4a", "--T", "3.5")
    assert r.exit_code == 0, r.output
    d = tmp_path / "control_fig4a"
    rep = json.loads((d / "synthesis_report.json").read_text())
    assert rep["terminal_rel_energy"] <= 1e-2
    head = (d / "control.csv").read_text().splitlines()[0]
    assert head == "segment_id,s,t,u,dnu,g"
    manifest_ok(d)
    r = invoke(runner, "verify", "--scenario", "fig4a", "--control", str(d / "control.csv"))
    assert r.exit_code == 0, r.output
    v = json.loads((tmp_path / "verify_fig4a" / "verification.json").read_text())
    assert v["terminal_rel_energy"] <= 2 * rep["terminal_rel_energy"]


def test_verify_rejects_signal_from_other_grid(runner, tmp_path):
    assert invoke(runner, "control", "--scenario", "fig4a", "--T", "3.5").exit_code == 0
    csv_path = tmp_path / "control_fig4a" / "control.csv"
    r = runner.invoke(main, ["verify", "--scenario", "fig4a", "--grid", "0.03", "--control", str(csv_path)])
    assert r.exit_code == 5


def test_oracle_check(runner, tmp_path):
    r = invoke(runner, "oracle-check")
    assert r.exit_code == 0, r.output
    assert "max relative L2 error" in r.output
    res = json.loads((tmp_path / "oracle-check_unit_box" / "oracle.json").read_text())
    assert res["max_relative_error"] > 0


def test_rays_and_decay_commands(runner, tmp_path):
    r = invoke(runner, "rays", "--scenario", "two_disc", "--n-rays", "16", "--t-max", "10")
    assert r.exit_code == 0, r.output
    rep = json.loads((tmp_path / "rays_two_disc" / "escape_report.json").read_text())
    assert rep["nontrapping_consistent"] is False
    r = invoke(runner, "decay", "--scenario", "free_space", "--grid", "0.1", "--draws", "2")
    assert r.exit_code == 0, r.output
    fit = json.loads((tmp_path / "decay_free_space" / "fit.json").read_text())
    assert fit["model"] == "power"


@pytest.mark.parametrize("binary", [False, True])
def test_snapshot_round_trip(tmp_path, binary):
    rng = np.random.default_rng(0)
    f = rng.standard_normal((7, 5))
    p = tmp_path / ("s.bin" if binary else "s.txt")
    write_snapshot(p, f, 0.1, 0.01, 0.37, "u", binary)
    g, meta = read_snapshot(p)
    np.testing.assert_array_equal(g, f)
    assert meta["nx"] == 7 and meta["ny"] == 5 and meta["t"] == 0.37
