"""Grid model construction, validation, admittance, and serialization."""

from __future__ import annotations

import json

import numpy as np
import pytest

from powerfd.grid import (
    BUS_CHANNELS,
    LINE_CHANNELS,
    Branch,
    Bus,
    GridFormatError,
    GridModel,
    GridValidationError,
    MeasurementDescriptor,
    MeasurementKind,
    MeasurementPlan,
    build_admittance,
    fixture_path,
    grid_from_dict,
    grid_to_dict,
    load_grid,
    save_grid,
    validate_grid,
)


def two_bus_doc() -> dict:
    return {
        "base_mva": 100.0,
        "slack_bus": 0,
        "buses": [
            {"id": 0, "p_load": 0.0, "q_load": 0.0, "p_gen": 0.5, "q_gen": 0.1},
            {"id": 1, "p_load": 0.2, "q_load": 0.05, "p_gen": 0.0, "q_gen": 0.0},
        ],
        "branches": [
            {"from": 0, "to": 1, "g": 1.0, "b": -5.0, "g_sf": 0.0, "b_sf": 0.0,
             "g_st": 0.0, "b_st": 0.0, "in_service": True},
        ],
        "measurements": [
            {"kind": "BusP", "location": 1, "sigma": 0.006},
            {"kind": "BusQ", "location": 1, "sigma": 0.006},
            {"kind": "BusV", "location": 0, "sigma": 0.003},
            {"kind": "LinePIn", "location": 0, "sigma": 0.006},
        ],
    }


def test_kind_partition():
    for kind in MeasurementKind:
        assert kind.is_bus_kind != kind.is_line_kind
    assert set(BUS_CHANNELS) == {k for k in MeasurementKind if k.is_bus_kind}
    assert set(LINE_CHANNELS) == {k for k in MeasurementKind if k.is_line_kind}


def test_line_kind_direction():
    assert MeasurementKind.LINE_P_IN.direction == "in"
    assert MeasurementKind.LINE_Q_OUT.direction == "out"
    assert MeasurementKind.LINE_I_OUT.direction == "out"
    with pytest.raises(ValueError):
        MeasurementKind.BUS_V.direction


def test_bus_has_injection():
    assert not Bus(0).has_injection
    assert Bus(0, p_load=0.1).has_injection
    assert Bus(0, q_gen=-0.2).has_injection


def test_branch_direction_roles():
    br = Branch(2, 5, 1.0, -4.0, 0.01, 0.02, 0.03, 0.04)
    assert br.endpoints("in") == (2, 5)
    assert br.endpoints("out") == (5, 2)
    assert br.shunt("in") == (0.01, 0.02)
    assert br.shunt("out") == (0.03, 0.04)
    with pytest.raises(ValueError):
        br.endpoints("sideways")


def test_plan_lookup_helpers():
    plan = MeasurementPlan((
        MeasurementDescriptor(MeasurementKind.BUS_V, 0, 0.003),
        MeasurementDescriptor(MeasurementKind.BUS_P, 2, 0.006),
        MeasurementDescriptor(MeasurementKind.LINE_I_OUT, 1, 0.005),
    ))
    assert len(plan) == 3
    np.testing.assert_allclose(plan.sigmas(), [0.003, 0.006, 0.005])
    assert plan.monitored_buses() == [0, 2]
    assert plan.monitored_lines() == [1]
    assert plan.index_of(MeasurementKind.LINE_I_OUT, 1) == 2
    assert plan.index_of(MeasurementKind.BUS_P, 7) is None


def test_admittance_two_bus():
    grid = grid_from_dict(two_bus_doc())
    y = build_admittance(grid)
    np.testing.assert_allclose(y.g, [[1.0, -1.0], [-1.0, 1.0]])
    np.testing.assert_allclose(y.b, [[-5.0, 5.0], [5.0, -5.0]])


def test_admittance_includes_shunts_on_diagonal():
    doc = two_bus_doc()
    doc["branches"][0]["b_sf"] = 0.02
    doc["branches"][0]["b_st"] = 0.03
    y = build_admittance(grid_from_dict(doc))
    np.testing.assert_allclose(y.b, [[-4.98, 5.0], [5.0, -4.97]])


def test_admittance_skips_out_of_service():
    buses = (Bus(0), Bus(1), Bus(2, p_load=0.1))
    branches = (
        Branch(0, 1, 1.0, -5.0),
        Branch(1, 2, 1.0, -5.0),
        Branch(0, 2, 2.0, -8.0, in_service=False),
    )
    plan = MeasurementPlan(tuple(
        MeasurementDescriptor(MeasurementKind.BUS_V, b, 0.003) for b in range(3)
    ) + (
        MeasurementDescriptor(MeasurementKind.BUS_P, 1, 0.006),
        MeasurementDescriptor(MeasurementKind.BUS_P, 2, 0.006),
    ))
    grid = GridModel(buses=buses, branches=branches, slack_bus=0, base_mva=100.0,
                     measurement_plan=plan)
    y = build_admittance(grid)
    assert y.g[0, 2] == 0.0
    assert y.b[0, 2] == 0.0
    assert y.g[0, 0] == 1.0


def test_validate_fixture_grids(grid4, grid14):
    assert validate_grid(grid4) == []
    assert validate_grid(grid14) == []
    assert grid4.n_states == 7
    assert len(grid4.measurement_plan) == 42
    assert grid14.n_states == 27
    assert len(grid14.measurement_plan) == 146


@pytest.mark.parametrize("mutate, fragment", [
    (lambda d: d["buses"].__setitem__(0, {**d["buses"][0], "id": 5}), "consecutive"),
    (lambda d: d.update(slack_bus=9), "slack"),
    (lambda d: d.update(base_mva=0.0), "base_mva"),
    (lambda d: d["branches"][0].update({"to": 0}), "itself"),
    (lambda d: d["branches"][0].update({"g": 0.0, "b": 0.0}), "zero series admittance"),
    (lambda d: d["branches"][0].update({"in_service": False}), "service"),
    (lambda d: d["measurements"][0].update({"sigma": 0.0}), "sigma"),
    (lambda d: d["measurements"][0].update({"location": 3}), "nonexistent bus"),
    (lambda d: d["measurements"][3].update({"location": 2}), "nonexistent branch"),
    (lambda d: d["measurements"].__setitem__(
        1, {"kind": "BusP", "location": 1, "sigma": 0.006}), "duplicate"),
    (lambda d: (d["measurements"].pop(), d["measurements"].pop()), "observability"),
])
def test_validation_rejects(mutate, fragment):
    doc = two_bus_doc()
    mutate(doc)
    violations = validate_grid(grid_from_dict(doc))
    assert any(fragment in v for v in violations), violations


def test_load_grid_raises_on_invalid_file(tmp_path):
    doc = two_bus_doc()
    doc["slack_bus"] = 9
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(GridValidationError):
        load_grid(path)


def test_validation_rejects_metering_dead_branch():
    doc = two_bus_doc()
    doc["buses"].append({"id": 2, "p_load": 0.1, "q_load": 0.0, "p_gen": 0.0, "q_gen": 0.0})
    doc["branches"].append({"from": 1, "to": 2, "g": 0.5, "b": -2.0, "g_sf": 0.0,
                            "b_sf": 0.0, "g_st": 0.0, "b_st": 0.0, "in_service": False})
    doc["measurements"] += [
        {"kind": "BusV", "location": 1, "sigma": 0.003},
        {"kind": "BusV", "location": 2, "sigma": 0.003},
        {"kind": "LineQIn", "location": 1, "sigma": 0.006},
    ]
    violations = validate_grid(grid_from_dict(doc))
    assert any("out-of-service" in v for v in violations)
    assert any("not connected" in v for v in violations)


def test_round_trip_through_dict(grid4):
    assert grid_from_dict(grid_to_dict(grid4)) == grid4


def test_round_trip_through_file(tmp_path, grid14):
    path = tmp_path / "copy.json"
    save_grid(grid14, path)
    assert load_grid(path) == grid14


def test_slack_bus_accepts_singleton_list():
    doc = two_bus_doc()
    doc["slack_bus"] = [0]
    assert grid_from_dict(doc).slack_bus == 0
    doc["slack_bus"] = [0, 1]
    with pytest.raises(GridValidationError):
        grid_from_dict(doc)


def test_malformed_json_raises_format_error(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(GridFormatError):
        load_grid(path)


def test_missing_key_raises_format_error():
    doc = two_bus_doc()
    del doc["branches"]
    with pytest.raises(GridFormatError):
        grid_from_dict(doc)


def test_topology_helpers(grid4):
    assert grid4.neighbors(0) == [1, 2]
    assert grid4.neighbors(3) == [1, 2]
    assert grid4.incident_branches(1) == [0, 2, 3]
    assert grid4.injection_buses() == [0, 1, 2, 3]


def test_fixture_paths_exist():
    for name in ("grid4.json", "grid14.json"):
        path = fixture_path(name)
        assert path.is_file()
        json.loads(path.read_text())
