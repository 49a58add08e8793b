# tests/test-channel-twin/test_devices.py

import sys
import math
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[2]))

from channel_twin.devices import (
    AntennaArray,
    RisPanel,
    Terminal,
    apply_ris_to_path,
    array_response,
    dbm_to_watts,
    doppler_shift,
    frame_from_normal,
    ris_array_factor,
    ris_multibeam_optimize,
    ris_panel_object,
    ris_single_beam_profile,
    watts_to_dbm,
    wrap_phase,
)
from channel_twin.errors import InvalidArgumentError

LAMBDA = 0.1


def _panel(rows=32, cols=32):
    return RisPanel("p", rows, cols, LAMBDA / 2, np.zeros(3))


# ── Conversiones ────────────────────────────────────────────────────────────

def test_dbm_watts_round_trip():
    assert dbm_to_watts(30.0) == pytest.approx(1.0)
    assert dbm_to_watts(0.0) == pytest.approx(1e-3)
    assert watts_to_dbm(dbm_to_watts(17.5)) == pytest.approx(17.5)


def test_wrap_phase_interval():
    p = wrap_phase(np.array([-math.pi, math.pi, 3 * math.pi, -0.5, 7.0]))
    assert np.all(p > -math.pi) and np.all(p <= math.pi)
    assert p[0] == pytest.approx(math.pi)
    assert p[3] == pytest.approx(-0.5)


# ── Arrays ──────────────────────────────────────────────────────────────────

def test_array_response_broadside_is_all_ones():
    arr = AntennaArray(rows=2, cols=4, spacing_v=LAMBDA / 2, spacing_h=LAMBDA / 2)
    a = array_response(arr, (0.0, 0.0), LAMBDA)
    assert a.shape == (8,)
    assert np.allclose(a, 1.0)


def test_array_response_endfire_phase_progression():
    arr = AntennaArray(rows=1, cols=3, spacing_h=LAMBDA / 2)
    a = array_response(arr, (math.pi / 2, 0.0), LAMBDA)
    assert np.allclose(a, [1.0, -1.0, 1.0])


def test_terminal_heading_rotates_array():
    arr = AntennaArray(rows=1, cols=3, spacing_h=LAMBDA / 2)
    t = Terminal("ue", np.zeros(3), heading=math.pi / 2, array=arr)
    # con heading 90° el array mira a +y; la dirección +y es ahora broadside
    assert np.allclose(array_response(t.array, (math.pi / 2, 0.0), LAMBDA), 1.0)


def test_terminal_rejects_non_finite_power():
    with pytest.raises(InvalidArgumentError):
        Terminal("bs", np.zeros(3), tx_power_dbm=math.inf)


def test_terminal_moved():
    t = Terminal("ue", np.array([1.0, 2.0, 3.0]), velocity=np.array([2.0, 0.0, -1.0]))
    assert np.allclose(t.moved(0.5).position, [2.0, 2.0, 2.5])
    assert np.allclose(t.position, [1.0, 2.0, 3.0])


# ── Doppler ─────────────────────────────────────────────────────────────────

def test_doppler_approaching_is_positive():
    # rx en +x se mueve hacia el tx situado en el origen
    aod = np.array([1.0, 0.0, 0.0])
    aoa = np.array([-1.0, 0.0, 0.0])
    f = doppler_shift(aod, aoa, np.zeros(3), np.array([-10.0, 0.0, 0.0]), LAMBDA)
    assert f == pytest.approx(100.0)


def test_doppler_antisymmetry():
    rng = np.random.default_rng(0)
    aod, aoa = rng.normal(size=3), rng.normal(size=3)
    aod, aoa = aod / np.linalg.norm(aod), aoa / np.linalg.norm(aoa)
    v_tx, v_rx = rng.normal(size=3), rng.normal(size=3)
    f = doppler_shift(aod, aoa, v_tx, v_rx, LAMBDA)
    assert doppler_shift(-aod, -aoa, v_tx, v_rx, LAMBDA) == pytest.approx(-f)


def test_doppler_static_is_zero():
    assert doppler_shift([1, 0, 0], [0, 1, 0], np.zeros(3), np.zeros(3), LAMBDA) == 0.0


# ── RIS ─────────────────────────────────────────────────────────────────────

def test_ris_single_beam_steering_grid_argmax():
    panel = _panel()
    theta0, phi0 = math.radians(30), math.radians(45)
    profile = ris_single_beam_profile(panel, theta0, phi0, LAMBDA)
    phis = np.radians(np.arange(360))
    best, best_idx = -1.0, None
    for th_deg in range(90):
        th = math.radians(th_deg)
        af = np.abs(ris_array_factor(panel, np.full(360, th), phis, LAMBDA, profile))
        j = int(np.argmax(af))
        if af[j] > best:
            best, best_idx = af[j], (th_deg, j)
    assert best_idx == (30, 45)
    assert best == pytest.approx(panel.size, abs=1e-9)


def test_ris_profile_is_wrapped():
    profile = ris_single_beam_profile(_panel(8, 8), 1.0, 0.3, LAMBDA)
    assert np.all(profile > -math.pi) and np.all(profile <= math.pi)


def test_multibeam_objective_is_monotone():
    panel = _panel(8, 8)
    targets = [(math.radians(20), 0.0), (math.radians(40), math.pi), (math.radians(30), math.pi / 2)]
    result = ris_multibeam_optimize(panel, targets, None, LAMBDA, iterations=60, seed=1)
    hist = np.asarray(result.objective_history)
    assert len(hist) == 61
    assert np.all(np.diff(hist) <= 1e-15)
    assert result.phase_profile.shape == (64,)


def test_multibeam_single_target_matches_linear_profile():
    panel = _panel(8, 8)
    theta0, phi0 = math.radians(25), math.radians(60)
    result = ris_multibeam_optimize(panel, [(theta0, phi0)], None, LAMBDA, iterations=50, seed=3)
    ref = abs(ris_array_factor(panel, theta0, phi0, LAMBDA,
                               ris_single_beam_profile(panel, theta0, phi0, LAMBDA))[0])
    got = abs(ris_array_factor(panel, theta0, phi0, LAMBDA, result.phase_profile)[0])
    assert got >= 0.98 * ref


def test_multibeam_is_seeded():
    panel = _panel(6, 6)
    targets = [(0.3, 0.0), (0.6, 2.0)]
    a = ris_multibeam_optimize(panel, targets, [1.0, 2.0], LAMBDA, iterations=20, seed=9)
    b = ris_multibeam_optimize(panel, targets, [1.0, 2.0], LAMBDA, iterations=20, seed=9)
    assert np.array_equal(a.phase_profile, b.phase_profile)


def test_apply_ris_back_side_is_zero():
    panel = RisPanel("p", 4, 4, LAMBDA / 2, np.zeros(3), frame_from_normal([0.0, 0.0, 1.0]))
    # la onda llega desde detrás (viaja hacia +z)
    assert apply_ris_to_path([0.0, 0.0, 1.0], panel, [0.0, 0.0, 1.0], LAMBDA) == 0


def test_apply_ris_specular_with_zero_profile():
    panel = RisPanel("p", 4, 4, LAMBDA / 2, np.zeros(3), frame_from_normal([0.0, 0.0, 1.0]))
    d_in = np.array([1.0, 0.0, -1.0]) / math.sqrt(2)
    d_out = np.array([1.0, 0.0, 1.0]) / math.sqrt(2)
    assert abs(apply_ris_to_path(d_in, panel, d_out, LAMBDA)) == pytest.approx(1.0)


def test_apply_ris_steers_away_from_mirror_image():
    panel = _panel()
    profile = ris_single_beam_profile(panel, math.radians(30), 0.0, LAMBDA)
    panel = panel.with_profile(profile)
    d_in = np.array([0.0, 0.0, -1.0])
    toward = np.array([math.sin(math.radians(30)), 0.0, math.cos(math.radians(30))])
    away = np.array([-toward[0], 0.0, toward[2]])
    g_toward = abs(apply_ris_to_path(d_in, panel, toward, LAMBDA))
    g_away = abs(apply_ris_to_path(d_in, panel, away, LAMBDA))
    assert g_toward == pytest.approx(1.0, abs=1e-9)
    assert g_toward >= 100 * g_away


def test_multibeam_two_symmetric_targets_split_power():
    panel = _panel(16, 16)
    theta = math.radians(30)
    targets = [(theta, 0.0), (theta, math.pi)]
    result = ris_multibeam_optimize(panel, targets, [1.0, 1.0], LAMBDA, iterations=100, seed=2)
    for t, p in targets:
        gain = abs(ris_array_factor(panel, t, p, LAMBDA, result.phase_profile)[0])
        assert gain >= 0.4 * panel.size



def test_ris_panel_object_geometry():
    panel = RisPanel("north", 4, 6, LAMBDA / 2, np.array([1.0, 2.0, 3.0]),
                     frame_from_normal([0.0, -1.0, 0.0]))
    obj = ris_panel_object(panel)
    assert obj.name == "ris_north" and obj.ris
    pts = np.asarray(obj.triangles).reshape(-1, 3)
    assert np.allclose(pts[:, 1], 2.0)
