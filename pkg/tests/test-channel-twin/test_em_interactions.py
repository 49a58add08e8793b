# tests/test-channel-twin/test_em_interactions.py

import sys
import math
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[2]))

from channel_twin.em_interactions import (
    InterfaceGeometry,
    WedgeGeometry,
    diffract_field,
    fresnel_par,
    fresnel_perp,
    reflect_direction,
    reflect_field,
    snell_angle,
    transmission_coeffs,
    transmitted_power_factor,
    update_amplitude,
    utd_diffraction_coeff,
)
from channel_twin.errors import InvalidArgumentError, InvalidGeometryError


# ── Fresnel ─────────────────────────────────────────────────────────────────

def test_brewster_null():
    n2 = 1.5
    geom = InterfaceGeometry(math.atan(n2), 1.0, n2)
    assert abs(fresnel_par(geom)) < 1e-9


def test_normal_incidence_matches_closed_form():
    n2 = 2.0
    geom = InterfaceGeometry(0.0, 1.0, n2)
    assert fresnel_perp(geom) == pytest.approx((1 - n2) / (1 + n2))
    assert fresnel_par(geom) == pytest.approx((n2 - 1) / (n2 + 1))


def test_normal_incidence_parallel_is_opposite_of_perpendicular():
    geom = InterfaceGeometry(0.0, 1.0, 1.5)
    assert fresnel_perp(geom) == pytest.approx(-0.2)
    assert fresnel_par(geom) == pytest.approx(0.2)


def test_lossless_power_conservation_randomized():
    rng = np.random.default_rng(42)
    n1 = rng.uniform(1.0, 2.0, 1000)
    n2 = rng.uniform(1.0, 3.0, 1000)
    theta = rng.uniform(0.0, math.pi / 2 - 1e-3, 1000)
    geom = InterfaceGeometry(theta, n1, n2)
    t_perp, t_par = transmission_coeffs(geom)
    r_perp = np.abs(fresnel_perp(geom)) ** 2 + transmitted_power_factor(geom, t_perp)
    r_par = np.abs(fresnel_par(geom)) ** 2 + transmitted_power_factor(geom, t_par)
    assert np.max(np.abs(r_perp - 1.0)) < 1e-9
    assert np.max(np.abs(r_par - 1.0)) < 1e-9


def test_total_internal_reflection():
    theta = np.linspace(math.asin(1.0 / 1.5) + 1e-3, math.pi / 2 - 1e-3, 50)
    geom = InterfaceGeometry(theta, 1.5, 1.0)
    assert np.max(np.abs(np.abs(fresnel_perp(geom)) - 1.0)) < 1e-12
    assert np.max(np.abs(np.abs(fresnel_par(geom)) - 1.0)) < 1e-12


def test_perfect_conductor():
    geom = InterfaceGeometry(0.4, 1.0, complex(math.inf, -math.inf))
    assert fresnel_perp(geom) == -1.0
    assert fresnel_par(geom) == 1.0
    assert transmission_coeffs(geom) == (0j, 0j)


def test_snell_real_case():
    geom = InterfaceGeometry(math.radians(30), 1.0, 1.5)
    theta_t = snell_angle(geom)
    assert math.sin(theta_t.real) == pytest.approx(math.sin(math.radians(30)) / 1.5)
    assert abs(theta_t.imag) < 1e-12


def test_lossy_transmission_decays():
    geom = InterfaceGeometry(0.3, 1.0, complex(2.3, -0.4))
    assert np.imag(geom.q()) <= 0.0


def test_domain_checks():
    with pytest.raises(InvalidArgumentError):
        InterfaceGeometry(2.0, 1.0, 1.5)
    with pytest.raises(InvalidArgumentError):
        InterfaceGeometry(0.1, 0.5, 1.5)


# ── Amplitud y dirección ────────────────────────────────────────────────────

def test_update_amplitude_free_space():
    lam = 0.1
    a = update_amplitude(1.0, 1.0, 10.0, lam)
    assert abs(a) == pytest.approx(0.1)
    assert np.angle(a) == pytest.approx(np.angle(np.exp(-1j * 2 * math.pi / lam * 10.0)))


def test_update_amplitude_rejects_zero_length():
    with pytest.raises(InvalidArgumentError):
        update_amplitude(1.0, 1.0, 0.0, 0.1)


def test_reflect_direction_mirror():
    d = np.array([1.0, 0.0, -1.0]) / math.sqrt(2)
    r = reflect_direction(d, np.array([0.0, 0.0, 1.0]))
    assert np.allclose(r, [1 / math.sqrt(2), 0.0, 1 / math.sqrt(2)])


def test_reflect_field_pec_flips_tangential_component():
    d = np.array([[1.0, 0.0, -1.0]]) / math.sqrt(2)
    n = np.array([[0.0, 0.0, 1.0]])
    field = np.array([[0.0, 1.0, 0.0]], dtype=complex)  # perpendicular al plano de incidencia
    r, out = reflect_field(field, d, n, -1.0, 1.0)
    assert np.allclose(out, [[0.0, -1.0, 0.0]])
    assert abs(np.sum(out * r)) < 1e-12


# ── UTD ─────────────────────────────────────────────────────────────────────

def _right_angle_wedge():
    # arista en z, caras en +x (cara 0) y +y; el exterior ocupa 270°
    return WedgeGeometry(math.pi / 2, (0.0, 0.0, 1.0), (1.0, 0.0, 0.0), (0.0, -1.0, 0.0))


def test_wedge_parameter():
    assert _right_angle_wedge().n == pytest.approx(1.5)


def test_keller_cone_violation_raises():
    w = _right_angle_wedge()
    inc = np.array([1.0, -1.0, 0.0]) / math.sqrt(2)
    out = np.array([-1.0, 0.0, 1.0]) / math.sqrt(2)
    with pytest.raises(InvalidGeometryError):
        utd_diffraction_coeff(w, inc, out, 5.0, 5.0, 0.1)


def test_coefficient_finite_on_shadow_boundary():
    w = _right_angle_wedge()
    src = np.array([1.0, -1.0, 0.0]) / math.sqrt(2)   # fuente en φ' = 45°
    inc = -src
    out = inc.copy()                                   # observador sobre la frontera de sombra
    for pol in ("soft", "hard"):
        d = utd_diffraction_coeff(w, inc, out, 5.0, 5.0, 0.1, pol)
        assert np.isfinite(d.real) and np.isfinite(d.imag)


def test_diffracted_field_is_transverse():
    w = _right_angle_wedge()
    inc = np.array([-1.0, 1.0, 0.0]) / math.sqrt(2)
    out = np.array([-0.6, -0.8, 0.0])
    f = diffract_field(np.array([0.0, 0.0, 1.0], dtype=complex), w, inc, out, 3.0, 4.0, 0.1)
    assert abs(f @ out) < 1e-12
    assert np.linalg.norm(f) > 0


def _wedge_dir(phi_deg):
    """Dirección en el plano ⊥ a la arista a un ángulo φ de la cara 0."""
    phi = math.radians(phi_deg)
    return np.array([math.cos(phi), -math.sin(phi), 0.0])


@pytest.mark.parametrize("pol, angles", [
    ("soft", np.linspace(230.0, 268.0, 20)),
    ("hard", [235.0, 245.0, 255.0, 265.0]),
])
def test_deep_shadow_decays(pol, angles):
    w = _right_angle_wedge()
    inc = -_wedge_dir(45.0)
    mags = [abs(utd_diffraction_coeff(w, inc, _wedge_dir(a), 5.0, 5.0, 0.1, pol)) for a in angles]
    assert all(b < a for a, b in zip(mags, mags[1:]))


@pytest.mark.parametrize("pol", ["soft", "hard"])
def test_total_field_continuous_across_shadow_boundary(pol):
    w = _right_angle_wedge()
    lam, s_prime, s = 0.1, 5.0, 5.0
    k = 2 * math.pi / lam
    src = s_prime * _wedge_dir(45.0)
    boundary = 225.0
    totals = []
    for delta in (-1e-4, 1e-4):
        out = _wedge_dir(boundary + math.degrees(delta))
        r = np.linalg.norm(s * out - src)
        direct = np.exp(-1j * k * r) / r if delta < 0 else 0.0
        d = utd_diffraction_coeff(w, -src / s_prime, out, s_prime, s, lam, pol)
        totals.append(direct + np.exp(-1j * k * (s + s_prime)) / s_prime * d)
    assert abs(totals[0] - totals[1]) / abs(totals[0]) < 0.01


@pytest.mark.parametrize("pol", ["soft", "hard"])
def test_coefficient_scales_with_sqrt_wavelength(pol):
    w = _right_angle_wedge()
    inc = -_wedge_dir(45.0)
    lams = np.array([0.01, 0.02, 0.04, 0.08])
    mags = [abs(utd_diffraction_coeff(w, inc, _wedge_dir(180.0), 5.0, 5.0, lam, pol)) for lam in lams]
    slope = np.polyfit(np.log(lams), np.log(mags), 1)[0]
    assert slope == pytest.approx(0.5, abs=0.01)
