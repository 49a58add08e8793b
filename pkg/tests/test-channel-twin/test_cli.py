# tests/test-channel-twin/test_cli.py
"""
Tests de integración de la CLI:
  validate → informe JSON y código 1 ante configuraciones inválidas.
  run      → paquete completo, verificable y reproducible con la misma semilla.
  coverage → imagen PPM + CSV de una sola rejilla.
"""
import sys
import json
import shutil
import importlib.util
from pathlib import Path

import pytest

_project_root = Path(__file__).resolve().parents[2]
if str(_project_root) not in sys.path:
    sys.path.insert(0, str(_project_root))

from channel_twin.cli import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, main
from channel_twin.dataset_io import MANIFEST, read_manifest, verify_package

FIXTURES = Path(__file__).resolve().parent / "fixtures"


def _load_module(unique_name: str, rel_path: str):
    module_path = _project_root / rel_path
    spec = importlib.util.spec_from_file_location(unique_name, str(module_path))
    mod = importlib.util.module_from_spec(spec)
    sys.modules[unique_name] = mod
    spec.loader.exec_module(mod)
    return mod


def _config(tmp_path: Path, **overrides) -> Path:
    """Copia la escena y escribe una configuración ligera con los cambios pedidos."""
    shutil.copy(FIXTURES / "shoebox.xml", tmp_path / "shoebox.xml")
    doc = json.loads((FIXTURES / "shoebox_config.json").read_text(encoding="utf-8"))
    doc["launch"]["count"] = 4000
    doc.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


# ── validate ────────────────────────────────────────────────────────────────

@pytest.mark.integration
def test_validate_ok(tmp_path, capsys):
    assert main(["validate", str(_config(tmp_path))]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report == {"ok": True, "issues": []}


@pytest.mark.integration
def test_validate_rejects_zero_interactions(tmp_path, capsys):
    cfg = _config(tmp_path, termination={"max_interactions": 0})
    assert main(["validate", str(cfg)]) == EXIT_VALIDATION
    report = json.loads(capsys.readouterr().out)
    assert [i["check"] for i in report["issues"]] == ["TerminationPolicy"]


@pytest.mark.integration
def test_validate_reports_unmatched_material_rules(tmp_path, capsys):
    cfg = _config(tmp_path, material_rules={"wall": "concrete"})
    assert main(["validate", str(cfg)]) == EXIT_VALIDATION
    report = json.loads(capsys.readouterr().out)
    (issue,) = report["issues"]
    assert issue["check"] == "assign_materials_by_name"
    assert "ceiling" in issue["message"] and "floor" in issue["message"]


@pytest.mark.integration
def test_validate_collects_several_issues(tmp_path, capsys):
    cfg = _config(tmp_path, termination={"max_interactions": 0}, bandwidth_hz=-1.0,
                  polarization=["V", "X"])
    assert main(["validate", str(cfg)]) == EXIT_VALIDATION
    checks = {i["check"] for i in json.loads(capsys.readouterr().out)["issues"]}
    assert checks == {"TerminationPolicy", "channel", "polarization"}


@pytest.mark.integration
def test_validate_terminal_outside_scene(tmp_path, capsys):
    cfg = _config(tmp_path, receivers=[{"id": "ue1", "position": [30.0, 0.0, 1.0]}])
    assert main(["validate", str(cfg)]) == EXIT_VALIDATION
    checks = [i["check"] for i in json.loads(capsys.readouterr().out)["issues"]]
    assert checks == ["receivers[0]"]


@pytest.mark.integration
def test_run_with_invalid_config_exits_1(tmp_path, capsys):
    cfg = _config(tmp_path, termination={"max_interactions": 0})
    assert main(["run", str(cfg), "-o", str(tmp_path / "out")]) == EXIT_VALIDATION
    assert "TerminationPolicy" in capsys.readouterr().out
    assert not (tmp_path / "out").exists()


# ── run ─────────────────────────────────────────────────────────────────────

@pytest.mark.integration
def test_run_writes_verifiable_package(tmp_path):
    out = tmp_path / "out"
    assert main(["run", str(_config(tmp_path)), "-o", str(out), "--threads", "1"]) == EXIT_OK
    rows = verify_package(out)
    files = {r["path"] for r in rows}
    assert {"scene.xml", "config.json", "coverage/floor_map.csv", "coverage/floor_map.ppm"} <= files
    for link in ("bs1__ue1", "bs1__ue2"):
        assert {f"paths/{link}.csv", f"channels/{link}.dtch", f"channels/{link}.json"} <= files
    meta = json.loads((out / "channels" / "bs1__ue1.json").read_text(encoding="utf-8"))
    # 1×2 en tx, 1 elemento en rx, 16 puntos de CFR
    assert len(meta["freq_grid_hz"]) == 16
    assert all(len(t["matrix"]) == 1 and len(t["matrix"][0]) == 2 for t in meta["cir_taps"])


@pytest.mark.integration
def test_same_seed_gives_identical_packages(tmp_path):
    cfg = _config(tmp_path)
    assert main(["run", str(cfg), "-o", str(tmp_path / "a"), "--threads", "1", "--seed", "3"]) == EXIT_OK
    assert main(["run", str(cfg), "-o", str(tmp_path / "b"), "--threads", "4", "--seed", "3"]) == EXIT_OK
    assert (tmp_path / "a" / MANIFEST).read_bytes() == (tmp_path / "b" / MANIFEST).read_bytes()
    doc = json.loads((tmp_path / "a" / "config.json").read_text(encoding="utf-8"))
    assert doc["simulation"]["seed"] == 3


@pytest.mark.integration
def test_snapshots_add_time_indexed_links(tmp_path):
    out = tmp_path / "out"
    cfg = _config(tmp_path, snapshots=[0.0, 0.5], grids=[])
    assert main(["run", str(cfg), "-o", str(out), "--threads", "1"]) == EXIT_OK
    ids = {r["link_or_grid_id"] for r in read_manifest(out) if r["role"] == "channel_meta"}
    assert ids == {"bs1__ue1", "bs1__ue2", "bs1__ue1__t000", "bs1__ue1__t001",
                   "bs1__ue2__t000", "bs1__ue2__t001"}
    meta = json.loads((out / "channels" / "bs1__ue1__t001.json").read_text(encoding="utf-8"))
    assert meta["time_s"] == 0.5


@pytest.mark.integration
def test_run_refuses_non_empty_output(tmp_path, capsys):
    out = tmp_path / "out"
    out.mkdir()
    (out / "previous.txt").write_text("x")
    assert main(["run", str(_config(tmp_path)), "-o", str(out)]) == EXIT_RUNTIME
    assert "no está vacío" in capsys.readouterr().out
    assert [p.name for p in out.iterdir()] == ["previous.txt"]


@pytest.mark.integration
def test_run_unwritable_output_exits_2(tmp_path, capsys):
    blocker = tmp_path / "blocker"
    blocker.write_text("soy un archivo")
    cfg = _config(tmp_path, grids=[])
    assert main(["run", str(cfg), "-o", str(blocker / "out"), "--threads", "1"]) == EXIT_RUNTIME
    assert "E/S" in capsys.readouterr().out
    assert blocker.read_text() == "soy un archivo"


@pytest.mark.integration
def test_unexpected_failure_exits_2(tmp_path, capsys, monkeypatch):
    import channel_twin.cli as cli

    def boom(*args, **kwargs):
        raise RuntimeError("fallo interno")

    monkeypatch.setattr(cli, "simulate", boom)
    assert main(["run", str(_config(tmp_path)), "-o", str(tmp_path / "out")]) == EXIT_RUNTIME
    assert "RuntimeError: fallo interno" in capsys.readouterr().out
    assert not (tmp_path / "out").exists()


@pytest.mark.integration
def test_threads_must_be_positive(tmp_path):
    assert main(["run", str(_config(tmp_path)), "-o", str(tmp_path / "out"), "--threads", "0"]) == EXIT_VALIDATION


# ── coverage ────────────────────────────────────────────────────────────────

@pytest.mark.integration
def test_coverage_unknown_grid_lists_available(tmp_path, capsys):
    cfg = _config(tmp_path)
    assert main(["coverage", str(cfg), "--grid", "roof", "-o", str(tmp_path / "m.ppm")]) == EXIT_VALIDATION
    out = capsys.readouterr().out
    assert "roof" in out and "floor_map" in out
    assert not (tmp_path / "m.ppm").exists()


@pytest.mark.integration
def test_coverage_writes_image_and_csv(tmp_path):
    cfg = _config(tmp_path)
    image = tmp_path / "maps" / "floor.ppm"
    assert main(["coverage", str(cfg), "--grid", "floor_map", "-o", str(image), "--threads", "1"]) == EXIT_OK
    assert image.read_bytes().startswith(b"P6\n4 3\n255\n")
    lines = image.with_suffix(".csv").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 1 + 12


# ── scripts/verify_package.py ───────────────────────────────────────────────

@pytest.mark.integration
def test_verify_script_accepts_fresh_package(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", str(_config(tmp_path, grids=[])), "-o", str(out), "--threads", "1"]) == EXIT_OK
    mod = _load_module("_verify_package_ok", "channel_twin/scripts/verify_package.py")
    mod.main([str(out)])
    printed = capsys.readouterr().out
    assert "Todo en orden" in printed
    assert "channel_tensor" in printed


@pytest.mark.integration
def test_verify_script_flags_tampered_tensor(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", str(_config(tmp_path, grids=[])), "-o", str(out), "--threads", "1"]) == EXIT_OK
    tensor = out / "channels" / "bs1__ue1.dtch"
    tensor.write_bytes(tensor.read_bytes()[:-4])
    mod = _load_module("_verify_package_bad", "channel_twin/scripts/verify_package.py")
    with pytest.raises(SystemExit) as info:
        mod.main([str(out)])
    assert info.value.code == 1
    assert "bs1__ue1.dtch" in capsys.readouterr().out
