#!/usr/bin/env python3
"""
Módulo: channel_synthesis.py
Ubicación: channel_twin/

Caminos trazados → respuestas de canal MIMO:
- assemble_cir          → taps H_n = Σ α·a_r·a_tᴴ con n = round(τ·B).
- evaluate_cfr          → H(f) exacto sobre una rejilla de frecuencias.
- default_freq_grid     → F puntos equiespaciados en [−B/2, B/2).
- path_metrics          → tabla por camino (pérdida, retardo, ángulos, Doppler, fase).
- power_delay_profile   → potencia por tap.
- synthesize_link       → ChannelResponse de un enlace.
- time_series_channel   → retrazado completo por instante con el MT desplazado p + v·t.

La ganancia α está normalizada a espacio libre (1 m LOS = λ/4π); la potencia
de transmisión no entra en α.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .devices import AntennaArray, Terminal, array_response
from .errors import InvalidArgumentError
from .ray_engine import (  # noqa: F401  (PathRecord e InteractionEvent se exponen aquí)
    Bvh,
    InteractionEvent,
    PathRecord,
    TerminationPolicy,
    TraceStats,
    trace_paths,
)
from .scene_model import Scene

log = logging.getLogger(__name__)

CirTaps = List[Tuple[int, np.ndarray]]


@dataclass
class ChannelResponse:
    link_id: Tuple[str, str]
    cir_taps: CirTaps
    cfr: np.ndarray
    sample_rate: float
    freq_grid: np.ndarray
    time: float = 0.0
    paths: List[PathRecord] = field(default_factory=list, compare=False, repr=False)

    def __post_init__(self):
        if self.cfr.ndim != 3 or self.cfr.shape[2] != len(self.freq_grid):
            raise InvalidArgumentError("channel_synthesis: dimensiones de CFR inconsistentes")

    @property
    def tap_resolution(self) -> float:
        return 1.0 / self.sample_rate


@dataclass
class PathMetric:
    path_loss_db: float
    delay: float
    aod: Tuple[float, float]
    aoa: Tuple[float, float]
    doppler: float
    phase: float


def _path_matrix(path: PathRecord, tx_array: AntennaArray, rx_array: AntennaArray,
                 wavelength: float) -> np.ndarray:
    a_r = array_response(rx_array, path.aoa, wavelength)
    a_t = array_response(tx_array, path.aod, wavelength)
    return path.gain * np.outer(a_r, np.conj(a_t))


def assemble_cir(paths: Sequence[PathRecord], tx_array: AntennaArray, rx_array: AntennaArray,
                 wavelength: float, bandwidth: float) -> CirTaps:
    if not bandwidth > 0:
        raise InvalidArgumentError("channel_synthesis: el ancho de banda debe ser > 0")
    taps = {}
    for p in paths:
        n = int(round(p.delay * bandwidth))
        m = _path_matrix(p, tx_array, rx_array, wavelength)
        taps[n] = taps[n] + m if n in taps else m
    return sorted(taps.items(), key=lambda item: item[0])


def default_freq_grid(bandwidth: float, points: int) -> np.ndarray:
    """f_k = (k − F/2)·B/F, k = 0..F−1 (relativo a la portadora)."""
    if points < 1:
        raise InvalidArgumentError("channel_synthesis: se necesita al menos un punto de CFR")
    k = np.arange(points)
    return (k - points / 2.0) * bandwidth / points


def evaluate_cfr(paths: Sequence[PathRecord], tx_array: AntennaArray, rx_array: AntennaArray,
                 wavelength: float, freq_grid) -> np.ndarray:
    """H(f) = Σ α·a_r·a_tᴴ·e^{−j2πfτ}, sin agrupar en taps."""
    freq = np.asarray(freq_grid, dtype=float)
    if freq.size == 0 or not np.all(np.isfinite(freq)):
        raise InvalidArgumentError("channel_synthesis: rejilla de frecuencias vacía o no finita")
    out = np.zeros((rx_array.size, tx_array.size, freq.size), dtype=complex)
    for p in paths:
        m = _path_matrix(p, tx_array, rx_array, wavelength)
        out += m[:, :, None] * np.exp(-2j * math.pi * freq * p.delay)[None, None, :]
    return out


def path_metrics(paths: Sequence[PathRecord]) -> List[PathMetric]:
    """Pérdida −20·log10|α|; los caminos con α = 0 se descartan con aviso."""
    rows = []
    for i, p in enumerate(paths):
        mag = abs(p.gain)
        if mag == 0.0:
            log.warning("channel_synthesis: camino %d con ganancia nula descartado", i)
            continue
        rows.append(PathMetric(
            path_loss_db=-20.0 * math.log10(mag),
            delay=p.delay, aod=p.aod, aoa=p.aoa, doppler=p.doppler,
            phase=math.atan2(p.gain.imag, p.gain.real),
        ))
    return rows


def power_delay_profile(cir_taps: CirTaps) -> List[Tuple[int, float]]:
    """Energía de Frobenius de cada tap."""
    return [(n, float(np.sum(np.abs(m) ** 2))) for n, m in cir_taps]


def synthesize_link(link_id: Tuple[str, str], paths: Sequence[PathRecord], tx_array: AntennaArray,
                    rx_array: AntennaArray, wavelength: float, bandwidth: float,
                    cfr_points: int, time: float = 0.0) -> ChannelResponse:
    grid = default_freq_grid(bandwidth, cfr_points)
    return ChannelResponse(
        link_id=link_id,
        cir_taps=assemble_cir(paths, tx_array, rx_array, wavelength, bandwidth),
        cfr=evaluate_cfr(paths, tx_array, rx_array, wavelength, grid),
        sample_rate=bandwidth,
        freq_grid=grid,
        time=time,
        paths=list(paths),
    )


def time_series_channel(scene: Scene, bvh: Optional[Bvh], tx: Terminal, rx: Terminal,
                        times: Sequence[float], policy: Optional[TerminationPolicy],
                        launch: Optional[np.ndarray], bandwidth: float, cfr_points: int,
                        capture_radius: float = 0.5, stats: Optional[TraceStats] = None,
                        **trace_kwargs) -> List[ChannelResponse]:
    """
    Un ChannelResponse por instante. Ambos terminales avanzan p + v·t y la
    escena se retraza por completo en cada instante (modelo cuasi-estático).
    """
    times = [float(t) for t in times]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise InvalidArgumentError("channel_synthesis: los instantes deben ser estrictamente crecientes")
    lam = scene.wavelength
    out = []
    for t in times:
        tx_t, rx_t = tx.moved(t), rx.moved(t)
        paths = trace_paths(scene, bvh, tx_t.position, [rx_t.position], policy, launch, capture_radius,
                            tx_velocity=tx_t.velocity, rx_velocities=[rx_t.velocity],
                            stats=stats, **trace_kwargs)[0]
        out.append(synthesize_link((tx.id, rx.id), paths, tx_t.array, rx_t.array, lam,
                                   bandwidth, cfr_points, time=t))
        log.debug("Instante %.6g s: %d caminos", t, len(paths))
    return out
