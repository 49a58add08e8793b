#!/usr/bin/env python3
"""
Módulo: em_interactions.py
Ubicación: channel_twin/

Física de cada interacción (funciones puras, vectorizadas con numpy):
- InterfaceGeometry      → θ_i, n1, n2, λ de una interfaz.
- snell_angle            → ángulo transmitido complejo.
- fresnel_perp / fresnel_par / transmission_coeffs → Γ⊥, Γ∥, (T⊥, T∥).
- update_amplitude       → α·coef·e^{−jkd}/d.
- reflect_direction      → r = d − 2(d·n)n.
- reflect_field / transmit_field → campo vectorial en la base local (⊥, ∥).
- WedgeGeometry / utd_diffraction_coeff → UTD de cuña conductora perfecta.
- diffract_field         → aplica D_s/D_h a las componentes β/φ del campo.

Convención temporal e^{jωt}: las ondas transmitidas decaen con Im(n cos θ_t) ≤ 0.
"""
import math
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
from scipy import special

from .errors import InvalidArgumentError, InvalidGeometryError

ArrayLike = Union[float, complex, np.ndarray]

KELLER_TOLERANCE = 1e-6
ANGLE_TOLERANCE = 1e-9
# |ε| por debajo del cual cot·F se sustituye por su límite analítico
_SHADOW_EPS = 1e-7


@dataclass(frozen=True)
class InterfaceGeometry:
    """Admite escalares o arrays del mismo tamaño (uso vectorizado en el trazador)."""
    incident_angle: ArrayLike
    n1: ArrayLike
    n2: ArrayLike
    wavelength: float = 1.0

    def __post_init__(self):
        theta = np.asarray(self.incident_angle, dtype=float)
        if np.any(theta < -ANGLE_TOLERANCE) or np.any(theta > math.pi / 2 + ANGLE_TOLERANCE):
            raise InvalidArgumentError("em_interactions: θ_i fuera de [0, π/2]")
        if not self.wavelength > 0:
            raise InvalidArgumentError("em_interactions: λ debe ser > 0")
        for n in (self.n1, self.n2):
            re = np.real(np.asarray(n, dtype=complex))
            if np.any(re < 1.0 - 1e-12):
                raise InvalidArgumentError("em_interactions: Re(n) < 1")

    @property
    def pec(self) -> np.ndarray:
        return np.isinf(np.asarray(self.n2, dtype=complex))

    def cos_i(self) -> np.ndarray:
        return np.cos(np.clip(np.asarray(self.incident_angle, dtype=float), 0.0, math.pi / 2))

    def q(self) -> np.ndarray:
        """n2·cos θ_t con la rama que hace decaer la onda transmitida."""
        n1 = np.asarray(self.n1, dtype=complex)
        n2 = np.asarray(self.n2, dtype=complex)
        sin_i = np.sin(np.asarray(self.incident_angle, dtype=float))
        with np.errstate(invalid='ignore'):
            q = np.sqrt(n2 * n2 - (n1 * sin_i) ** 2)
        return np.where(np.imag(q) > 0, -q, q)


def _scalar(x):
    arr = np.asarray(x)
    return arr.item() if arr.ndim == 0 else arr


def snell_angle(geom: InterfaceGeometry) -> ArrayLike:
    """θ_t complejo con sin θ_t = (n1/n2)·sin θ_i y cos θ_t = q/n2."""
    n1 = np.asarray(geom.n1, dtype=complex)
    n2 = np.asarray(geom.n2, dtype=complex)
    with np.errstate(invalid='ignore', divide='ignore'):
        sin_t = n1 * np.sin(np.asarray(geom.incident_angle, dtype=float)) / n2
        cos_t = geom.q() / n2
        theta_t = -1j * np.log(cos_t + 1j * sin_t)
    theta_t = np.where(geom.pec, 0.0, theta_t)
    return _scalar(theta_t)


def fresnel_perp(geom: InterfaceGeometry) -> ArrayLike:
    n1 = np.asarray(geom.n1, dtype=complex)
    a = n1 * geom.cos_i()
    q = geom.q()
    with np.errstate(invalid='ignore', divide='ignore'):
        gamma = (a - q) / (a + q)
    return _scalar(np.where(geom.pec, -1.0 + 0j, gamma))


def fresnel_par(geom: InterfaceGeometry) -> ArrayLike:
    n1 = np.asarray(geom.n1, dtype=complex)
    n2 = np.asarray(geom.n2, dtype=complex)
    cos_i = geom.cos_i()
    q = geom.q()
    with np.errstate(invalid='ignore', divide='ignore'):
        gamma = (n2 * n2 * cos_i - n1 * q) / (n2 * n2 * cos_i + n1 * q)
    return _scalar(np.where(geom.pec, 1.0 + 0j, gamma))


def transmission_coeffs(geom: InterfaceGeometry) -> Tuple[ArrayLike, ArrayLike]:
    """T⊥ = 1 + Γ⊥, T∥ = (1 + Γ∥)·n1/n2; un conductor perfecto no transmite."""
    n1 = np.asarray(geom.n1, dtype=complex)
    n2 = np.asarray(geom.n2, dtype=complex)
    g_perp = np.asarray(fresnel_perp(geom))
    g_par = np.asarray(fresnel_par(geom))
    with np.errstate(invalid='ignore', divide='ignore'):
        t_perp = np.where(geom.pec, 0j, 1.0 + g_perp)
        t_par = np.where(geom.pec, 0j, (1.0 + g_par) * n1 / n2)
    return _scalar(t_perp), _scalar(t_par)


def transmitted_power_factor(geom: InterfaceGeometry, t: ArrayLike) -> ArrayLike:
    """Re(n2 cos θ_t)/(n1 cos θ_i)·|T|²; cero en reflexión total interna."""
    n1 = np.asarray(geom.n1, dtype=complex)
    return _scalar(np.real(geom.q()) / np.real(n1 * geom.cos_i()) * np.abs(t) ** 2)


def update_amplitude(alpha_old: complex, coeff: complex, segment_length: float,
                     wavelength: float) -> complex:
    if not segment_length > 0:
        raise InvalidArgumentError("em_interactions: longitud de tramo debe ser > 0")
    if not wavelength > 0:
        raise InvalidArgumentError("em_interactions: λ debe ser > 0")
    k = 2.0 * math.pi / wavelength
    return alpha_old * coeff * np.exp(-1j * k * segment_length) / segment_length


# ── Campo vectorial ─────────────────────────────────────────────────────────

def _normalize(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def reflect_direction(direction: np.ndarray, normal: np.ndarray) -> np.ndarray:
    d = np.asarray(direction, dtype=float)
    n = np.asarray(normal, dtype=float)
    dn = np.sum(d * n, axis=-1, keepdims=True)
    return _normalize(d - 2.0 * dn * n)


def perpendicular_basis(direction: np.ndarray, normal: np.ndarray) -> np.ndarray:
    """ê⊥ = normalize(d × n); en incidencia normal cualquier vector ⊥ a d."""
    d = np.atleast_2d(np.asarray(direction, dtype=float))
    n = np.atleast_2d(np.asarray(normal, dtype=float))
    e = np.cross(d, n)
    norm = np.linalg.norm(e, axis=-1)
    degenerate = norm < 1e-12
    if np.any(degenerate):
        dd = d[degenerate]
        helper = np.where(np.abs(dd[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
        e[degenerate] = np.cross(dd, helper)
        norm = np.linalg.norm(e, axis=-1)
    return e / norm[:, None]


def incidence_angle(direction: np.ndarray, normal: np.ndarray) -> np.ndarray:
    cos = np.abs(np.sum(np.atleast_2d(direction) * np.atleast_2d(normal), axis=-1))
    return np.arccos(np.clip(cos, 0.0, 1.0))


def _dot(a, b):
    return np.sum(a * b, axis=-1, keepdims=True)


def reflect_field(field: np.ndarray, direction: np.ndarray, normal: np.ndarray,
                  gamma_perp: ArrayLike, gamma_par: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    """
    Devuelve (dirección reflejada, campo reflejado). El campo entra como
    (N, 3) complejo transversal a `direction`.
    """
    d = np.atleast_2d(direction)
    e_perp = perpendicular_basis(d, normal)
    r = reflect_direction(d, np.atleast_2d(normal))
    e_par_i = np.cross(e_perp, d)
    e_par_r = np.cross(e_perp, r)
    g_perp = np.reshape(gamma_perp, (-1, 1))
    g_par = np.reshape(gamma_par, (-1, 1))
    out = g_perp * _dot(field, e_perp) * e_perp + g_par * _dot(field, e_par_i) * e_par_r
    return r, out


def transmit_field(field: np.ndarray, direction: np.ndarray, normal: np.ndarray,
                   t_perp: ArrayLike, t_par: ArrayLike) -> np.ndarray:
    """Pared delgada: la dirección se conserva y cada componente se escala por T."""
    d = np.atleast_2d(direction)
    e_perp = perpendicular_basis(d, normal)
    e_par = np.cross(e_perp, d)
    tp = np.reshape(t_perp, (-1, 1))
    tl = np.reshape(t_par, (-1, 1))
    return tp * _dot(field, e_perp) * e_perp + tl * _dot(field, e_par) * e_par


# ── UTD ─────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class WedgeGeometry:
    """
    Cuña recta. `face0_dir` apunta desde la arista hacia dentro de la cara 0 y
    `face0_normal` es su normal exterior; φ se mide desde la cara 0 por la
    región exterior, de 0 a nπ con n = (2π − interior_angle)/π.
    """
    interior_angle: float
    edge_dir: Tuple[float, float, float]
    face0_dir: Tuple[float, float, float]
    face0_normal: Tuple[float, float, float]

    def __post_init__(self):
        if not 0.0 < self.interior_angle < 2.0 * math.pi:
            raise InvalidArgumentError("em_interactions: ángulo de cuña fuera de (0, 2π)")

    @property
    def n(self) -> float:
        return (2.0 * math.pi - self.interior_angle) / math.pi

    def angle_of(self, vector: np.ndarray) -> float:
        """Ángulo φ ∈ [0, 2π) de la proyección de `vector` en el plano ⊥ a la arista."""
        e = np.asarray(self.edge_dir, dtype=float)
        v = np.asarray(vector, dtype=float)
        v = v - (v @ e) * e
        phi = math.atan2(float(v @ np.asarray(self.face0_normal)), float(v @ np.asarray(self.face0_dir)))
        return phi % (2.0 * math.pi)


def _transition(x: np.ndarray) -> np.ndarray:
    """F(X) = 2j√X e^{jX} ∫_{√X}^∞ e^{−jτ²} dτ."""
    sqrt_x = np.sqrt(x)
    fm = special.modfresnelm(sqrt_x)[0]
    return 2j * sqrt_x * np.exp(1j * x) * fm


def _cot_f(beta: float, n: float, sign: int, kl: float) -> complex:
    """cot((π + s·β)/2n)·F(kL·a_s(β)) con el límite en la frontera de sombra."""
    n_int = round((beta + sign * math.pi) / (2.0 * math.pi * n))
    eps = math.pi + sign * (beta - 2.0 * math.pi * n * n_int)
    if abs(eps) < _SHADOW_EPS:
        sgn = 1.0 if eps >= 0 else -1.0
        return n * np.exp(1j * math.pi / 4) * (
            math.sqrt(2.0 * math.pi * kl) * sgn - 2.0 * kl * eps * np.exp(1j * math.pi / 4))
    a = 2.0 * math.cos((2.0 * math.pi * n * n_int - beta) / 2.0) ** 2
    cot = 1.0 / math.tan((math.pi + sign * beta) / (2.0 * n))
    return cot * complex(_transition(np.asarray(kl * a)))


def utd_diffraction_coeff(wedge: WedgeGeometry, incident_dir, diffracted_dir,
                          s_prime: float, s: float, wavelength: float,
                          polarization: str = 'soft') -> complex:
    """
    Coeficiente UTD de cuatro términos para cuña conductora perfecta,
    multiplicado por la dispersión √(s′/(s(s′+s))).

    incident_dir  → dirección de propagación de la fuente hacia la arista.
    diffracted_dir→ dirección de la arista hacia el observador.
    polarization  → 'soft' (componente β) o 'hard' (componente φ).
    """
    if not (s > 0 and s_prime > 0):
        raise InvalidArgumentError("em_interactions: distancias s, s′ deben ser > 0")
    if not wavelength > 0:
        raise InvalidArgumentError("em_interactions: λ debe ser > 0")
    if polarization not in ('soft', 'hard'):
        raise InvalidArgumentError(f"em_interactions: polarización desconocida '{polarization}'")

    e = np.asarray(wedge.edge_dir, dtype=float)
    s_in = np.asarray(incident_dir, dtype=float)
    s_out = np.asarray(diffracted_dir, dtype=float)
    beta_in = math.acos(max(-1.0, min(1.0, float(s_in @ e))))
    beta_out = math.acos(max(-1.0, min(1.0, float(s_out @ e))))
    if abs(beta_in - beta_out) > KELLER_TOLERANCE:
        raise InvalidGeometryError(
            f"em_interactions: fuera del cono de Keller ({abs(beta_in - beta_out):.3g} rad)")
    sin_b0 = math.sin(beta_out)
    if sin_b0 < 1e-9:
        raise InvalidGeometryError("em_interactions: rayo paralelo a la arista")

    n = wedge.n
    phi_src = wedge.angle_of(-s_in)
    phi_obs = wedge.angle_of(s_out)
    k = 2.0 * math.pi / wavelength
    kl = k * s * s_prime * sin_b0 ** 2 / (s + s_prime)

    minus = _cot_f(phi_obs - phi_src, n, 1, kl) + _cot_f(phi_obs - phi_src, n, -1, kl)
    plus = _cot_f(phi_obs + phi_src, n, 1, kl) + _cot_f(phi_obs + phi_src, n, -1, kl)
    sign = -1.0 if polarization == 'soft' else 1.0
    prefactor = -np.exp(-1j * math.pi / 4) / (2.0 * n * math.sqrt(2.0 * math.pi * k) * sin_b0)
    d = prefactor * (minus + sign * plus)
    return complex(d * math.sqrt(s_prime / (s * (s + s_prime))))


def edge_fixed_basis(direction: np.ndarray, edge_dir: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(β̂, φ̂) transversales a `direction` respecto a la arista."""
    phi_hat = np.cross(edge_dir, direction)
    phi_hat = phi_hat / np.linalg.norm(phi_hat)
    beta_hat = np.cross(phi_hat, direction)
    return beta_hat, phi_hat


def diffract_field(field: np.ndarray, wedge: WedgeGeometry, incident_dir, diffracted_dir,
                   s_prime: float, s: float, wavelength: float) -> np.ndarray:
    """Campo difractado: E_β ← D_s·E_β, E_φ ← D_h·E_φ (dispersión incluida)."""
    e = np.asarray(wedge.edge_dir, dtype=float)
    b_in, p_in = edge_fixed_basis(np.asarray(incident_dir, dtype=float), e)
    b_out, p_out = edge_fixed_basis(np.asarray(diffracted_dir, dtype=float), e)
    d_soft = utd_diffraction_coeff(wedge, incident_dir, diffracted_dir, s_prime, s, wavelength, 'soft')
    d_hard = utd_diffraction_coeff(wedge, incident_dir, diffracted_dir, s_prime, s, wavelength, 'hard')
    f = np.asarray(field, dtype=complex)
    return d_soft * (f @ b_in) * b_out + d_hard * (f @ p_in) * p_out
