import filecmp
import json
import os
import shutil

import numpy as np
import pytest

from dercoord import synthetic
from dercoord.errors import HorizonMismatchError, ScenarioInfeasibleError, SchemaError
from dercoord.scenario import (
    BUNDLED,
    RunManifest,
    bundled_path,
    dump_scenario,
    load_scenario,
    read_columns,
    write_columns,
)


def copy_bundle(name, tmp_path):
    src = os.path.dirname(bundled_path(name))
    dst = tmp_path / name
    shutil.copytree(src, dst, ignore=shutil.ignore_patterns("__pycache__"))
    return dst


def edit_json(path, fn):
    doc = json.loads(path.read_text())
    fn(doc)
    path.write_text(json.dumps(doc))


# Bundled scenarios


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_scenarios_load(name):
    scn = load_scenario(name)
    assert scn.timeline.ticks >= scn.horizon + scn.ticks_per_slot * scn.online.window
    assert len(scn.digest) == 64


def test_tutorial_contents():
    scn = load_scenario("tutorial")
    assert scn.feeder.node_count == 2
    assert scn.counts() == {"pv": 1, "hvac": 0, "battery": 1}
    assert scn.timeline.ticks == 9


def test_37_node_device_placement():
    scn = load_scenario("ieee37")
    assert scn.feeder.node_count == 36
    assert scn.counts() == {"pv": 18, "hvac": 375, "battery": 375}
    pv_nodes = sorted(d.node for d in scn.devices if d.kind == "pv")
    assert tuple(pv_nodes) == synthetic.PV_NODES
    for kind in ("hvac", "battery"):
        nodes = [d.node for d in scn.devices if d.kind == kind]
        assert sorted(set(nodes)) == list(synthetic.CHAIN_NODES)
        assert all(nodes.count(n) == 15 for n in synthetic.CHAIN_NODES)
    ratings = {d.node: d.params.eta for d in scn.devices if d.kind == "pv"}
    assert ratings[33] == ratings[34] == 350.0 and ratings[35] == ratings[36] == 300.0
    assert ratings[4] == 200.0


def test_37_node_battery_charge_step():
    scn = load_scenario("ieee37")
    b = next(d for d in scn.devices if d.kind == "battery")
    assert b.params.setpoints.max() * b.params.gain == pytest.approx(0.05, abs=1e-15)
    dis = [d.params.setpoints.min() for d in scn.devices if d.kind == "battery"]
    assert -4.4 <= min(dis) and max(dis) <= -3.6


def test_bundled_files_match_builders(tmp_path):
    synthetic.main(str(tmp_path))
    data = os.path.dirname(os.path.dirname(bundled_path("tutorial")))
    for name in BUNDLED:
        files = sorted(f for f in os.listdir(tmp_path / name))
        match, mismatch, errors = filecmp.cmpfiles(os.path.join(data, name), tmp_path / name, files, shallow=False)
        assert mismatch == [] and errors == [], (name, mismatch, errors)


def test_unknown_bundled_name():
    with pytest.raises(SchemaError):
        bundled_path("nope")


# Round trip


def _assert_same(a, b):
    np.testing.assert_array_equal(a.feeder.parents, b.feeder.parents)
    np.testing.assert_allclose(a.feeder.r_pu, b.feeder.r_pu, rtol=1e-15)
    np.testing.assert_allclose(a.model.A, b.model.A, rtol=1e-14)
    np.testing.assert_array_equal(a.spec.v_upper, b.spec.v_upper)
    for f in ("p0", "q0", "pv_avail", "T_out"):
        np.testing.assert_allclose(getattr(a.timeline, f), getattr(b.timeline, f), rtol=1e-14, atol=1e-17)
    assert [d.name for d in a.devices] == [d.name for d in b.devices]
    for da, db in zip(a.devices, b.devices):
        assert (da.kind, da.node, da.x0, da.period, da.phase) == (db.kind, db.node, db.x0, db.period, db.phase)
    assert (a.solver, a.online, a.horizon, a.seed) == (b.solver, b.online, b.horizon, b.seed)


@pytest.mark.parametrize("name", ["tutorial", "four_node"])
def test_dump_then_load_round_trips(name, tmp_path):
    a = load_scenario(name)
    b = load_scenario(dump_scenario(a, str(tmp_path / "out")))
    _assert_same(a, b)
    # a second dump is byte-identical to the first
    dump_scenario(b, str(tmp_path / "again"))
    for f in ("feeder.json", "roster.json", "timeline.csv"):
        assert filecmp.cmp(tmp_path / "out" / f, tmp_path / "again" / f, shallow=False)


# Validation


def test_short_csv_row_names_line(tmp_path):
    d = copy_bundle("tutorial", tmp_path)
    lines = (d / "timeline.csv").read_text().splitlines()
    lines[3] = ",".join(lines[3].split(",")[:-1])
    (d / "timeline.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(HorizonMismatchError) as err:
        load_scenario(str(d / "scenario.json"))
    assert err.value.location == "line 4"
    assert "timeline.csv" in str(err.value)


def test_missing_series_column_named(tmp_path):
    d = copy_bundle("tutorial", tmp_path)
    lines = (d / "timeline.csv").read_text().splitlines()
    cut = [",".join(ln.split(",")[:-1]) for ln in lines]  # drops T_out
    (d / "timeline.csv").write_text("\n".join(cut) + "\n")
    with pytest.raises(SchemaError) as err:
        load_scenario(str(d / "scenario.json"))
    assert "T_out" in str(err.value)


def test_non_numeric_value(tmp_path):
    d = copy_bundle("tutorial", tmp_path)
    text = (d / "timeline.csv").read_text().replace("80.0", "hot", 1)
    (d / "timeline.csv").write_text(text)
    with pytest.raises(SchemaError, match="non-numeric"):
        load_scenario(str(d / "scenario.json"))


def test_tick_gap(tmp_path):
    d = copy_bundle("tutorial", tmp_path)
    lines = (d / "timeline.csv").read_text().splitlines()
    del lines[5]
    (d / "timeline.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(HorizonMismatchError):
        load_scenario(str(d / "scenario.json"))


def test_horizon_longer_than_timeline(tmp_path):
    with pytest.raises(HorizonMismatchError):
        load_scenario("tutorial", {"horizon": 9})
    load_scenario("tutorial", {"horizon": 8})


def test_unknown_override_rejected():
    with pytest.raises(SchemaError, match="unknown overrides"):
        load_scenario("tutorial", {"stepsize": 1.0})


def test_overrides_apply():
    scn = load_scenario("tutorial", {"epsilon": 0.5, "seed": 9})
    assert scn.solver.epsilon == scn.online.epsilon == 0.5
    assert scn.seed == 9


@pytest.mark.parametrize(
    "fname,edit,location",
    [
        ("feeder.json", lambda d: d["lines"][1].__setitem__("r_ohm", -1.0), "$.lines[1].r_ohm"),
        ("feeder.json", lambda d: d.pop("voltage_limits"), "$.voltage_limits"),
        ("roster.json", lambda d: d["devices"][1].__setitem__("class", "fridge"), "$.devices[1].class"),
        ("scenario.json", lambda d: d["solver"].__setitem__("epsilon", "fast"), "$.solver.epsilon"),
    ],
)
def test_schema_errors_carry_json_path(tmp_path, fname, edit, location):
    d = copy_bundle("tutorial", tmp_path)
    edit_json(d / fname, edit)
    with pytest.raises(SchemaError) as err:
        load_scenario(str(d / "scenario.json"))
    assert err.value.location == location
    assert err.value.source.endswith(fname)


def test_invalid_json_reports_line(tmp_path):
    d = copy_bundle("tutorial", tmp_path)
    (d / "roster.json").write_text('{\n "devices": [\n,]\n}')
    with pytest.raises(SchemaError) as err:
        load_scenario(str(d / "scenario.json"))
    assert err.value.location == "line 3"


def test_missing_file(tmp_path):
    with pytest.raises(SchemaError, match="file not found"):
        load_scenario(str(tmp_path / "scenario.json"))


def test_unreachable_initial_state_is_infeasible(tmp_path):
    d = copy_bundle("tutorial", tmp_path)
    edit_json(d / "roster.json", lambda doc: doc["devices"][1].__setitem__("initial_state", 0.95))
    with pytest.raises(ScenarioInfeasibleError) as err:
        load_scenario(str(d / "scenario.json"))
    assert err.value.exit_code == 3
    assert "bat1" in str(err.value)


# Artifacts


def test_columns_round_trip(tmp_path):
    rows = [[0, 1.0 / 3, -2.5e-17], [1, 1e300, 0.1]]
    write_columns(str(tmp_path / "a.csv"), {"mode": "online", "seed": 3}, ["tick", "x", "y"], rows)
    header, names, arr = read_columns(str(tmp_path / "a.csv"))
    assert header == {"mode": "online", "seed": "3"}
    assert names == ["tick", "x", "y"]
    np.testing.assert_array_equal(arr, np.array(rows, dtype=float))


def test_manifest_round_trip(tmp_path):
    m = RunManifest("s.json", "ab" * 32, "offline", 4, {"epsilon": 1.0}, outputs=["mu.csv"])
    m.write(str(tmp_path / "m.json"))
    assert RunManifest.read(str(tmp_path / "m.json")) == m
