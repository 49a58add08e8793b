#!/usr/bin/env python3
"""
Módulo: devices.py
Ubicación: channel_twin/

Terminales, arrays de antenas, Doppler y paneles RIS:
- AntennaArray / Terminal / RisPanel → tipos de dispositivo.
- array_response          → vector de respuesta del array planar uniforme.
- doppler_shift           → desplazamiento Doppler cinemático de un camino.
- ris_single_beam_profile → gradiente lineal de fase hacia (θ₀, φ₀).
- ris_array_factor        → factor de array del panel (marco local).
- ris_multibeam_optimize  → codebook multi-haz por descenso de gradiente estocástico.
- apply_ris_to_path       → ganancia de reflexión del panel entre dos direcciones.
- ris_panel_object        → geometría del panel como SceneObject marcado.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidArgumentError, OptimizationError
from .scene_model import Material, Pose, SceneObject, load_material_table

log = logging.getLogger(__name__)

RIS_INIT_JITTER = 0.05
LINE_SEARCH_STEPS = 12


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def watts_to_dbm(watts: float) -> float:
    return 10.0 * math.log10(watts) + 30.0


def wrap_phase(phase) -> np.ndarray:
    """Envuelve a (−π, π]; −π se representa como π."""
    p = np.asarray(phase, dtype=float)
    return math.pi - np.mod(math.pi - p, 2.0 * math.pi)


def direction_from_angles(azimuth, elevation) -> np.ndarray:
    """k̂ = (cos el cos az, cos el sin az, sin el)."""
    az = np.asarray(azimuth, dtype=float)
    el = np.asarray(elevation, dtype=float)
    return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)


def angles_from_direction(direction) -> Tuple[float, float]:
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    return math.atan2(d[1], d[0]), math.asin(max(-1.0, min(1.0, d[2])))


# ── Arrays y terminales ─────────────────────────────────────────────────────

@dataclass
class AntennaArray:
    rows: int = 1
    cols: int = 1
    spacing_v: float = 0.5
    spacing_h: float = 0.5
    orientation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise InvalidArgumentError("devices: el array necesita al menos un elemento")
        if not (self.spacing_v > 0 and self.spacing_h > 0):
            raise InvalidArgumentError("devices: separaciones del array deben ser > 0")
        self.orientation = Pose(self.orientation).rotation

    @property
    def size(self) -> int:
        return self.rows * self.cols

    def element_positions(self) -> np.ndarray:
        """Elementos en el plano y–z local; índice = fila·cols + columna."""
        r, c = np.meshgrid(np.arange(self.rows), np.arange(self.cols), indexing='ij')
        local = np.stack([np.zeros(self.size), c.ravel() * self.spacing_h,
                          r.ravel() * self.spacing_v], axis=-1)
        return local


def array_response(array: AntennaArray, direction: Tuple[float, float], wavelength: float) -> np.ndarray:
    """a(Ω)_m = exp(j·(2π/λ)·k̂(Ω)·r_m) con k̂ expresado en el marco del array."""
    if not wavelength > 0:
        raise InvalidArgumentError("devices: λ debe ser > 0")
    k_hat = direction_from_angles(*direction)
    k_local = array.orientation.T @ k_hat
    phase = (2.0 * math.pi / wavelength) * (array.element_positions() @ k_local)
    return np.exp(1j * phase)


@dataclass
class Terminal:
    id: str
    position: np.ndarray
    heading: float = 0.0
    tilt: float = 0.0
    tx_power_dbm: float = 0.0
    array: AntennaArray = field(default_factory=AntennaArray)
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.velocity = np.asarray(self.velocity, dtype=float)
        if not math.isfinite(self.tx_power_dbm):
            raise InvalidArgumentError(f"devices: terminal '{self.id}': potencia no finita")
        self.array.orientation = Pose.from_heading_tilt(self.heading, self.tilt).rotation

    @property
    def tx_power_w(self) -> float:
        return dbm_to_watts(self.tx_power_dbm)

    def moved(self, dt: float) -> 'Terminal':
        """Copia con la posición avanzada p + v·t."""
        return replace(self, position=self.position + self.velocity * dt,
                       array=replace(self.array))


def doppler_shift(aod_dir, aoa_dir, tx_velocity, rx_velocity, wavelength: float) -> float:
    """
    f_d = (v_rx·û_AoA + v_tx·û_AoD)/λ.

    û_AoD apunta desde el transmisor a lo largo del camino; û_AoA apunta desde
    el receptor hacia donde llega la onda. Positivo cuando los extremos se acercan.
    """
    if not wavelength > 0:
        raise InvalidArgumentError("devices: λ debe ser > 0")
    return float((np.dot(rx_velocity, aoa_dir) + np.dot(tx_velocity, aod_dir)) / wavelength)


# ── RIS ─────────────────────────────────────────────────────────────────────

def frame_from_normal(normal) -> np.ndarray:
    """Rotación cuyo eje z local es `normal`; el eje x queda horizontal si es posible."""
    z = np.asarray(normal, dtype=float)
    z = z / np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0])
    x = np.cross(up, z)
    if np.linalg.norm(x) < 1e-9:
        x = np.array([1.0, 0.0, 0.0])
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


@dataclass
class RisPanel:
    id: str
    rows: int
    cols: int
    pitch: float
    center: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    phase_profile: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or not self.pitch > 0:
            raise InvalidArgumentError(f"devices: RIS '{self.id}' con geometría inválida")
        self.center = np.asarray(self.center, dtype=float)
        self.rotation = Pose(self.rotation).rotation
        profile = np.zeros(self.size) if self.phase_profile is None else self.phase_profile
        profile = np.asarray(profile, dtype=float).ravel()
        if profile.shape != (self.size,):
            raise InvalidArgumentError(f"devices: RIS '{self.id}': perfil de fase de tamaño incorrecto")
        self.phase_profile = wrap_phase(profile)

    @property
    def size(self) -> int:
        return self.rows * self.cols

    @property
    def normal(self) -> np.ndarray:
        return self.rotation[:, 2]

    def local_positions(self) -> np.ndarray:
        """Elementos centrados en el plano xy local, índice = fila·cols + columna."""
        r, c = np.meshgrid(np.arange(self.rows), np.arange(self.cols), indexing='ij')
        x = (c.ravel() - (self.cols - 1) / 2.0) * self.pitch
        y = (r.ravel() - (self.rows - 1) / 2.0) * self.pitch
        return np.stack([x, y, np.zeros(self.size)], axis=-1)

    def with_profile(self, profile) -> 'RisPanel':
        return replace(self, phase_profile=np.asarray(profile, dtype=float))

    def to_local(self, direction) -> np.ndarray:
        return self.rotation.T @ np.asarray(direction, dtype=float)


def _steering(panel: RisPanel, theta, phi, wavelength: float) -> np.ndarray:
    """(K, N) términos e^{jk(x sinθ cosφ + y sinθ sinφ)} por dirección local."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    k = 2.0 * math.pi / wavelength
    pos = panel.local_positions()
    u = np.sin(theta) * np.cos(phi)
    v = np.sin(theta) * np.sin(phi)
    return np.exp(1j * k * (np.outer(u, pos[:, 0]) + np.outer(v, pos[:, 1])))


def ris_single_beam_profile(panel: RisPanel, theta0: float, phi0: float, wavelength: float) -> np.ndarray:
    """Φ(x,y) = −(2π/λ)(x sinθ₀ cosφ₀ + y sinθ₀ sinφ₀), envuelto a (−π, π]."""
    if not wavelength > 0:
        raise InvalidArgumentError("devices: λ debe ser > 0")
    pos = panel.local_positions()
    k = 2.0 * math.pi / wavelength
    phase = -k * (pos[:, 0] * math.sin(theta0) * math.cos(phi0)
                  + pos[:, 1] * math.sin(theta0) * math.sin(phi0))
    return wrap_phase(phase)


def ris_array_factor(panel: RisPanel, theta, phi, wavelength: float,
                     profile: Optional[np.ndarray] = None) -> np.ndarray:
    """AF(θ, φ) = Σ_m e^{jΦ_m}·e^{jk(x_m sinθ cosφ + y_m sinθ sinφ)}."""
    profile = panel.phase_profile if profile is None else np.asarray(profile, dtype=float)
    return _steering(panel, theta, phi, wavelength) @ np.exp(1j * profile)


@dataclass
class MultiBeamResult:
    phase_profile: np.ndarray
    objective_history: List[float]

    @property
    def objective(self) -> float:
        return self.objective_history[-1]


def ris_multibeam_optimize(panel: RisPanel, targets: Sequence[Tuple[float, float]],
                           weights: Optional[Sequence[float]], wavelength: float,
                           iterations: int = 200, step_size: float = 0.5, seed: int = 0,
                           desired: Optional[Sequence[float]] = None,
                           sidelobe_weight: float = 0.0,
                           sidelobe_grid: Optional[Sequence[Tuple[float, float]]] = None) -> MultiBeamResult:
    """
    Minimiza Σ_t w_t(|AF_t|/N − g_t)² (+ penalización opcional de lóbulos
    laterales) sobre fases sin restricción. Cada iteración toma un minilote de
    objetivos con el generador sembrado y acepta el paso solo si el objetivo
    completo no aumenta (búsqueda con retroceso).
    `step_size` es por elemento: el paso efectivo se escala por N.
    """
    if iterations < 1:
        raise InvalidArgumentError("devices: se necesita al menos una iteración")
    if not targets:
        raise InvalidArgumentError("devices: se necesita al menos un objetivo")
    k_targets = len(targets)
    w = np.ones(k_targets) if weights is None else np.asarray(weights, dtype=float)
    g = (np.full(k_targets, 1.0 / math.sqrt(k_targets)) if desired is None
         else np.asarray(desired, dtype=float))
    if w.shape != (k_targets,) or g.shape != (k_targets,):
        raise InvalidArgumentError("devices: pesos/niveles no coinciden con los objetivos")

    n = panel.size
    theta = np.array([t[0] for t in targets])
    phi = np.array([t[1] for t in targets])
    steer = _steering(panel, theta, phi, wavelength)
    side = None
    if sidelobe_weight > 0 and sidelobe_grid:
        side = _steering(panel, [s[0] for s in sidelobe_grid], [s[1] for s in sidelobe_grid], wavelength)

    def objective(p: np.ndarray, idx: np.ndarray) -> float:
        af = np.abs(steer[idx] @ np.exp(1j * p)) / n
        val = float(np.sum(w[idx] * (af - g[idx]) ** 2))
        if side is not None:
            val += sidelobe_weight * float(np.mean((np.abs(side @ np.exp(1j * p)) / n) ** 2))
        return val

    def gradient(p: np.ndarray, idx: np.ndarray) -> np.ndarray:
        e = np.exp(1j * p)
        terms = steer[idx] * e
        af = terms.sum(axis=1)
        mag = np.maximum(np.abs(af), 1e-300)
        d_mag = -np.imag(np.conj(af)[:, None] * terms) / mag[:, None]
        coef = 2.0 * w[idx] * (mag / n - g[idx]) / n
        grad = coef @ d_mag
        if side is not None:
            st = side * e
            saf = st.sum(axis=1)
            d_pow = -2.0 * np.imag(np.conj(saf)[:, None] * st)
            grad += sidelobe_weight * d_pow.mean(axis=0) / n ** 2
        return grad

    rng = np.random.default_rng(seed)
    singles = np.stack([ris_single_beam_profile(panel, t, p, wavelength) for t, p in zip(theta, phi)])
    phases = np.angle(np.sum(w[:, None] * np.exp(1j * singles), axis=0))
    phases = phases + rng.normal(0.0, RIS_INIT_JITTER, size=n)

    everything = np.arange(k_targets)
    batch = k_targets if k_targets <= 4 else math.ceil(k_targets / 2)
    current = objective(phases, everything)
    if not math.isfinite(current):
        raise OptimizationError("devices: objetivo no finito en la inicialización")
    history = [current]

    for it in range(iterations):
        idx = everything if batch == k_targets else np.sort(rng.choice(k_targets, batch, replace=False))
        grad = gradient(phases, idx)
        step = step_size * n
        for _ in range(LINE_SEARCH_STEPS):
            candidate = phases - step * grad
            value = objective(candidate, everything)
            if not math.isfinite(value):
                raise OptimizationError(f"devices: objetivo no finito en la iteración {it}")
            if value <= current:
                phases, current = candidate, value
                break
            step *= 0.5
        history.append(current)

    log.debug("Multi-haz RIS '%s': objetivo %.3e → %.3e", panel.id, history[0], history[-1])
    return MultiBeamResult(phase_profile=wrap_phase(phases), objective_history=history)


def apply_ris_to_path(incident_dir, panel: RisPanel, outgoing_dir, wavelength: float) -> complex:
    """
    g = (1/N)·Σ_m e^{jΦ_m}·e^{−jk(d_in − d_out)·r_m}; nula si la onda llega o
    sale por la cara trasera del panel.
    """
    d_in = panel.to_local(incident_dir)
    d_out = panel.to_local(outgoing_dir)
    if d_in[2] >= 0 or d_out[2] <= 0:
        return 0j
    k = 2.0 * math.pi / wavelength
    phase = -k * (panel.local_positions() @ (d_in - d_out))
    return complex(np.mean(np.exp(1j * (panel.phase_profile + phase))))


def ris_panel_object(panel: RisPanel, material: Optional[Material] = None) -> SceneObject:
    """Rectángulo del panel como objeto RIS (dos triángulos)."""
    material = material or load_material_table()['metal']
    hx = panel.cols * panel.pitch / 2.0
    hy = panel.rows * panel.pitch / 2.0
    corners = [panel.center + panel.rotation @ np.array([sx * hx, sy * hy, 0.0])
               for sx, sy in ((-1, -1), (1, -1), (1, 1), (-1, 1))]
    c = [tuple(float(x) for x in p) for p in corners]
    return SceneObject(name=f"ris_{panel.id}", triangles=((c[0], c[1], c[2]), (c[0], c[2], c[3])),
                       material=material, ris=True)
