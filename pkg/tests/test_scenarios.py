import json

import numpy as np
import pytest

from sbcquad.barrier import barrier_value, check_initial_conditions
from sbcquad.scenarios import (BUILTIN_SCENARIOS, ScenarioError, apply_override, builtin, builtin_document,
                               config_from_dict, load_scenario, parse_value, random_scenario)

MINIMAL = {"vehicles": [{"reference": {"type": "hover", "position": [0, 0, -1]}},
                        {"reference": {"type": "hover", "position": [1, 0, -1]}}]}


def error_path(doc):
    with pytest.raises(ScenarioError) as err:
        config_from_dict(doc)
    return err.value.path


def test_minimal_document_uses_defaults():
    cfg = config_from_dict(MINIMAL)
    assert cfg.m == 2 and cfg.dt == 0.02 and cfg.ks == 0.0 and cfg.n_steps == 500
    assert cfg.geometry.D_s == 0.25 and cfg.geometry.c == 2.0
    assert cfg.snap_bound is None
    assert cfg.initial_states[1].r.tolist() == [1, 0, -1]
    assert not np.any(cfg.initial_states[1].stack()[1:])


def test_negative_safety_distance_names_field():
    doc = json.loads(json.dumps(MINIMAL))
    doc["geometry"] = {"D_s": -0.1}
    assert error_path(doc) == "geometry.D_s"


def test_unknown_keys_rejected():
    doc = dict(MINIMAL, colour="red")
    assert "<unknown key>" in error_path(doc)
    doc = json.loads(json.dumps(MINIMAL))
    doc["geometry"] = {"Ds": 0.3}
    assert error_path(doc).startswith("geometry")


def test_bad_reference_names_vehicle():
    doc = json.loads(json.dumps(MINIMAL))
    doc["vehicles"][1]["reference"] = {"type": "bezier", "p0": [0, 0, 0], "p1": [1, 1, 1], "T": -1}
    assert error_path(doc).startswith("vehicles.1.reference")


def test_overlapping_start_rejected():
    doc = json.loads(json.dumps(MINIMAL))
    doc["vehicles"][1]["reference"]["position"] = [0.1, 0, -1]
    assert error_path(doc) == "vehicles.0"


def test_override_aliases_and_paths():
    doc = builtin_document("two_quad_pass")
    apply_override(doc, "k_s", 100)
    apply_override(doc, "D_s", 0.3)
    apply_override(doc, "vehicles.1.reference.T", 3.0)
    cfg = config_from_dict(doc)
    assert cfg.ks == 100 and cfg.geometry.D_s == 0.3 and cfg.references[1].duration == 3.0


def test_parse_value():
    assert parse_value("100") == 100
    assert parse_value("[1, 2]") == [1, 2]
    assert parse_value("null") is None
    assert parse_value("rest") == "rest"


def test_load_from_file_and_missing(tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps(MINIMAL))
    assert load_scenario(str(p), {"dt": 0.01}).dt == 0.01
    with pytest.raises(ScenarioError):
        load_scenario(str(tmp_path / "nope.json"))
    p.write_text("{not json")
    with pytest.raises(ScenarioError):
        load_scenario(str(p))


def test_config_echo_round_trips():
    cfg = builtin("spinning_formation")
    again = config_from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()
    assert all(a == b for a, b in zip(again.initial_states, cfg.initial_states))


def test_static_formation_numbers():
    cfg = builtin("static_formation")
    ring = np.array([q.r for q in cfg.initial_states[:4]])
    assert np.allclose(sorted(map(tuple, ring[:, :2])), sorted([(0.25, 0), (0, 0.25), (-0.25, 0), (0, -0.25)]))
    assert np.all(ring[:, 2] == -0.8)
    q5 = cfg.references[4]
    assert np.allclose(q5(0.0)[0], (0.6, -0.6, -0.8)) and np.allclose(q5(np.inf)[0], (-0.6, 0.6, -0.8))
    assert cfg.geometry.D_s == 0.25


def test_spinning_formation_numbers():
    cfg = builtin("spinning_formation")
    for k, ph in enumerate([-np.pi / 2, 0, np.pi / 2, np.pi]):
        spec = cfg.reference_specs[k]
        assert spec["radius"] == 0.45 and spec["rate"] == pytest.approx(np.pi / 2) and spec["phase"] == pytest.approx(ph)
    assert np.allclose(cfg.references[1](0.0)[0], (0.45, 0, -0.8))
    assert np.allclose(cfg.references[4](0.0)[0], (-0.9, -0.9, -0.8))
    assert np.allclose(cfg.references[4](np.inf)[0], (0.9, 0.9, -0.8))
    # starts on its references, which must satisfy the output chain
    assert check_initial_conditions(cfg.initial_states, cfg.geometry, cfg.gains).passed


def test_every_builtin_loads():
    for name in BUILTIN_SCENARIOS:
        cfg = builtin(name)
        assert cfg.name == name and cfg.m >= 2


def test_random_scenarios_pass_initial_checks():
    rng = np.random.default_rng(0)
    for _ in range(30):
        cfg = random_scenario(rng)
        assert 2 <= cfg.m <= 5
        for i in range(cfg.m):
            for j in range(i + 1, cfg.m):
                assert barrier_value(cfg.initial_states[i], cfg.initial_states[j], cfg.geometry) > 0
        assert check_initial_conditions(cfg.initial_states, cfg.geometry, cfg.gains).passed


def test_retune_policy():
    cfg = builtin("two_quad_pass")
    assert cfg.retune.next_ks(0.0) == 1.0
    assert cfg.retune.next_ks(10.0) == 100.0
    assert cfg.with_ks(7.0).ks == 7.0
