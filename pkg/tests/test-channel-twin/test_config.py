# tests/test-channel-twin/test_config.py

import sys
import json
import math
import shutil
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[2]))

from channel_twin.config import design_ris, load_config, prepare_scene, validate_config
from channel_twin.devices import ris_single_beam_profile
from channel_twin.errors import ConfigError

FIXTURES = Path(__file__).resolve().parent / "fixtures"

RIS_ENTRY = {"id": "east", "rows": 6, "cols": 6, "pitch_wl": 0.5,
             "center": [4.9, 2.0, 1.5], "normal": [-1.0, 0.0, 0.0]}


def _write(tmp_path, **overrides):
    shutil.copy(FIXTURES / "shoebox.xml", tmp_path / "shoebox.xml")
    doc = json.loads((FIXTURES / "shoebox_config.json").read_text(encoding="utf-8"))
    doc.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


def test_fixture_loads():
    cfg = load_config(FIXTURES / "shoebox_config.json")
    assert [t.id for t in cfg.transmitters] == ["bs1"]
    assert [t.id for t in cfg.receivers] == ["ue1", "ue2"]
    assert cfg.transmitters[0].tx_power_w == pytest.approx(0.1)
    assert cfg.transmitters[0].array.spacing_h == pytest.approx(cfg.scene.wavelength / 2)
    assert cfg.policy.max_interactions == 2
    assert cfg.launch_directions().shape == (20000, 3)
    assert cfg.receivers[1].heading == pytest.approx(math.pi / 2)
    assert sorted(cfg.grids) == ["floor_map"] and cfg.grids["floor_map"].tx_id == "bs1"
    assert cfg.seed == 7


def test_seed_override_is_recorded():
    cfg = load_config(FIXTURES / "shoebox_config.json", seed=11)
    assert cfg.seed == 11
    assert cfg.document["seed"] == 11


def test_bias_band_in_degrees(tmp_path):
    cfg = load_config(_write(tmp_path, launch={"count": 1000, "bias": {"elevation_deg": [80, 100],
                                                                       "fraction": 0.5}}))
    band, fraction = cfg.bias
    assert band == pytest.approx((math.radians(80), math.radians(100)))
    assert fraction == 0.5


def test_material_rules_default(tmp_path):
    cfg = load_config(_write(tmp_path, material_rules="default"))
    assert {o.material.name for o in cfg.scene.objects} == {"concrete"}


def test_invalid_json_is_reported(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{ nope", encoding="utf-8")
    report = validate_config(path)
    assert report["ok"] is False
    assert report["issues"][0]["check"] == "config"


def test_missing_scene_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"scene": "nowhere.xml", "transmitters": []}), encoding="utf-8")
    with pytest.raises(ConfigError) as info:
        load_config(path)
    checks = [c for c, _ in info.value.issues]
    assert "scene" in checks and "transmitters" in checks


def test_duplicate_terminal_ids(tmp_path):
    cfg = _write(tmp_path, receivers=[{"id": "bs1", "position": [3.0, 2.0, 1.0]}])
    assert [i["check"] for i in validate_config(cfg)["issues"]] == ["terminals"]


def test_snapshots_must_increase(tmp_path):
    cfg = _write(tmp_path, snapshots=[0.0, 0.2, 0.1])
    assert [i["check"] for i in validate_config(cfg)["issues"]] == ["snapshots"]


def test_grid_with_unknown_transmitter(tmp_path):
    cfg = _write(tmp_path, grids=[{"id": "g", "center": [2.5, 2.0, 1.5], "size": [1.0, 1.0],
                                   "resolution": 1.0, "tx": "ghost"}])
    assert [i["check"] for i in validate_config(cfg)["issues"]] == ["grids[0]"]


# ── RIS ─────────────────────────────────────────────────────────────────────

def test_single_beam_ris_uses_linear_profile(tmp_path):
    entry = dict(RIS_ENTRY, beams=[{"theta_deg": 30, "phi_deg": 45}])
    cfg = load_config(_write(tmp_path, ris=[entry]))
    panel = design_ris(cfg.ris[0], cfg.scene.wavelength, cfg.seed)
    expected = ris_single_beam_profile(cfg.ris[0].panel, math.radians(30), math.radians(45),
                                       cfg.scene.wavelength)
    assert np.allclose(panel.phase_profile, expected)


def test_multibeam_ris_is_seeded(tmp_path):
    entry = dict(RIS_ENTRY, iterations=15,
                 beams=[{"theta_deg": 20, "phi_deg": 0}, {"theta_deg": 40, "phi_deg": 180, "weight": 2}])
    cfg = load_config(_write(tmp_path, ris=[entry]))
    a = design_ris(cfg.ris[0], cfg.scene.wavelength, 5)
    b = design_ris(cfg.ris[0], cfg.scene.wavelength, 5)
    assert np.array_equal(a.phase_profile, b.phase_profile)


def test_prepare_scene_inserts_panels(tmp_path):
    cfg = load_config(_write(tmp_path, ris=[RIS_ENTRY]))
    scene, panels = prepare_scene(cfg)
    assert [p.id for p in panels] == ["east"]
    assert scene.objects[-1].name == "ris_east"
    assert len(scene.objects) == len(cfg.scene.objects) + 1


def test_ris_without_normal_is_reported(tmp_path):
    entry = {k: v for k, v in RIS_ENTRY.items() if k != "normal"}
    assert [i["check"] for i in validate_config(_write(tmp_path, ris=[entry]))["issues"]] == ["ris[0]"]
