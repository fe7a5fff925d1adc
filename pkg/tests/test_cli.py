import filecmp
import json
import os
import shutil
from dataclasses import replace

import numpy as np
import pytest

from dercoord.cli import load_reference, main
from dercoord.online import ScenarioTimeline
from dercoord.scenario import RunManifest, bundled_path, dump_scenario, load_scenario, read_columns


def copy_bundle(name, tmp_path):
    dst = tmp_path / name
    shutil.copytree(os.path.dirname(bundled_path(name)), dst, ignore=shutil.ignore_patterns("__pycache__"))
    return dst


def frozen_scenario(out_dir, ticks=120):
    """The four-node PV fleet with every series held at its first value."""
    scn = load_scenario("four_node")
    tl = scn.timeline
    hold = lambda a: np.repeat(a[:1], ticks, axis=0)
    frozen = ScenarioTimeline(hold(tl.p0), hold(tl.q0), hold(tl.pv_avail), hold(tl.T_out), tl.tick_seconds)
    pv = [d for d in scn.devices if d.kind == "pv"]
    return dump_scenario(replace(scn, devices=pv, timeline=frozen, horizon=ticks - 2), str(out_dir))


def test_validate_reports_counts(capsys):
    assert main(["validate", "ieee37"]) == 0
    out = capsys.readouterr().out
    assert "36 nodes, 18 PV, 375 A/C, 375 batteries" in out
    assert "sha256" in out


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as err:
        main(["offline", "tutorial"])  # --out missing
    assert err.value.code == 2
    assert main(["validate", "no_such_dir/scenario.json"]) == 2
    assert "file not found" in capsys.readouterr().err


def test_schema_error_exit_2(tmp_path, capsys):
    d = copy_bundle("tutorial", tmp_path)
    (d / "feeder.json").write_text("{")
    assert main(["validate", str(d / "scenario.json")]) == 2
    assert "feeder.json" in capsys.readouterr().err


def test_infeasible_exit_3(tmp_path):
    d = copy_bundle("tutorial", tmp_path)
    doc = json.loads((d / "roster.json").read_text())
    doc["devices"][1]["initial_state"] = 0.95
    (d / "roster.json").write_text(json.dumps(doc))
    assert main(["validate", str(d / "scenario.json")]) == 3


def test_no_convergence_exit_4(tmp_path):
    d = copy_bundle("four_node", tmp_path)
    doc = json.loads((d / "scenario.json").read_text())
    doc["solver"]["max_iters"] = 3
    (d / "scenario.json").write_text(json.dumps(doc))
    assert main(["offline", str(d / "scenario.json"), "--out", str(tmp_path / "o")]) == 4
    assert (tmp_path / "o" / "dual.csv").exists()


def test_strict_stepsize_exit_2(tmp_path):
    argv = ["offline", "four_node", "--epsilon", "1e9", "--strict-stepsize", "--out", str(tmp_path)]
    assert main(argv) == 2


def test_offline_tutorial_writes_zero_multipliers(tmp_path):
    assert main(["offline", "tutorial", "--out", str(tmp_path)]) == 0
    header, names, dual = read_columns(str(tmp_path / "dual.csv"))
    assert names == ["slot", "row", "mu"]
    assert header["mode"] == "offline" and header["converged"] == "True"
    np.testing.assert_array_equal(dual[:, 2], 0.0)
    man = RunManifest.read(str(tmp_path / "manifest.json"))
    assert man.outputs == ["dual.csv", "iterates.csv", "solution.csv"]
    assert man.scenario_sha256 == load_scenario("tutorial").digest


def test_online_replay_is_byte_identical(tmp_path):
    argv = ["online", "four_node", "--horizon", "60", "--reference", "--out"]
    assert main(argv + [str(tmp_path / "a")]) == 0
    assert main(argv + [str(tmp_path / "b")]) == 0
    files = sorted(os.listdir(tmp_path / "a"))
    assert "reference.csv" in files and "manifest.json" in files
    _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", files, shallow=False)
    assert mismatch == [] and errors == []


def test_seed_override_changes_trace(tmp_path):
    for name, seed in (("a", "1"), ("b", "2")):
        assert main(["online", "ieee37", "--horizon", "61", "--seed", seed, "--out", str(tmp_path / name)]) == 0
    assert not filecmp.cmp(tmp_path / "a" / "power.csv", tmp_path / "b" / "power.csv", shallow=False)


def test_analyze_frozen_trace_has_zero_drift(tmp_path, capsys):
    path = frozen_scenario(tmp_path / "frozen")
    run = tmp_path / "run"
    assert main(["online", path, "--reference", "--out", str(run)]) == 0
    assert main(["analyze", str(run)]) == 0
    rep = json.loads((run / "bounds.json").read_text())
    assert rep["constants"]["e"] == 0.0
    assert rep["constants"]["rho"] == 0.0
    assert rep["passes"]["online"]
    _, ref = load_reference(str(run / "reference.csv"))
    assert ref["mu"].shape == ref["mu_star"].shape
    assert "online: pass" in capsys.readouterr().out


def test_analyze_needs_reference(tmp_path):
    assert main(["online", "tutorial", "--out", str(tmp_path)]) == 0
    assert main(["analyze", str(tmp_path)]) == 5
