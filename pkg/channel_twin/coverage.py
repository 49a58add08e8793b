#!/usr/bin/env python3
"""
Módulo: coverage.py
Ubicación: channel_twin/

Mapas de cobertura sobre un plano:
- GridSpec / CoverageGrid → rejilla planar y sus valores (dBm, NaN = sin cobertura).
- compute_coverage        → suma no coherente P_tx·Σ|α|² en el centro de cada celda.
- rasterize               → imagen PPM binaria (P6) con una paleta de matplotlib.
- write_coverage_csv / read_coverage_csv → volcado numérico.
"""
import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from matplotlib import colormaps

from .devices import Terminal, frame_from_normal
from .errors import InvalidArgumentError
from .ray_engine import Bvh, TerminationPolicy, TraceStats, trace_paths
from .scene_model import Scene

log = logging.getLogger(__name__)

CSV_HEADER = ['cell_x', 'cell_y', 'x', 'y', 'z', 'power_dBm']
NO_COVERAGE = float('nan')


@dataclass
class GridSpec:
    grid_id: str
    center: Tuple[float, float, float]
    size: Tuple[float, float]
    resolution: float
    normal: Tuple[float, float, float] = (0.0, 0.0, 1.0)
    rotation: float = 0.0

    def __post_init__(self):
        self.center = tuple(float(c) for c in self.center)
        self.size = tuple(float(s) for s in self.size)
        self.normal = tuple(float(c) for c in self.normal)
        if len(self.size) != 2 or min(self.size) <= 0:
            raise InvalidArgumentError(f"coverage: rejilla '{self.grid_id}': tamaño debe ser > 0")
        if not self.resolution > 0:
            raise InvalidArgumentError(f"coverage: rejilla '{self.grid_id}': resolución debe ser > 0")

    @property
    def shape(self) -> Tuple[int, int]:
        """(ny, nx) = (⌈h·res⌉, ⌈w·res⌉)."""
        return (math.ceil(self.size[1] * self.resolution - 1e-9),
                math.ceil(self.size[0] * self.resolution - 1e-9))

    def axes(self) -> Tuple[np.ndarray, np.ndarray]:
        frame = frame_from_normal(self.normal)
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        u = c * frame[:, 0] + s * frame[:, 1]
        v = -s * frame[:, 0] + c * frame[:, 1]
        return u, v

    def cell_centers(self) -> np.ndarray:
        """(ny, nx, 3) centros de celda, simétricos respecto a `center`."""
        ny, nx = self.shape
        step = 1.0 / self.resolution
        iu = (np.arange(nx) - (nx - 1) / 2.0) * step
        iv = (np.arange(ny) - (ny - 1) / 2.0) * step
        u, v = self.axes()
        return (np.asarray(self.center)[None, None, :]
                + iv[:, None, None] * v[None, None, :] + iu[None, :, None] * u[None, None, :])

    def to_dict(self) -> dict:
        return {'center': list(self.center), 'size': list(self.size), 'resolution': self.resolution,
                'normal': list(self.normal), 'rotation_rad': self.rotation}

    @classmethod
    def from_dict(cls, grid_id: str, data: dict) -> 'GridSpec':
        return cls(grid_id, tuple(data['center']), tuple(data['size']), float(data['resolution']),
                   tuple(data.get('normal', (0.0, 0.0, 1.0))), float(data.get('rotation_rad', 0.0)))


@dataclass
class CoverageGrid:
    spec: GridSpec
    values: np.ndarray
    quantity: str = 'power_dBm'
    path_counts: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.spec.shape:
            raise InvalidArgumentError("coverage: dimensiones de valores no coinciden con la rejilla")

    @property
    def covered(self) -> np.ndarray:
        return ~np.isnan(self.values)


def compute_coverage(scene: Scene, bvh: Optional[Bvh], tx: Terminal, spec: GridSpec,
                     policy: Optional[TerminationPolicy], launch: Optional[np.ndarray],
                     capture_radius: float = 0.5, stats: Optional[TraceStats] = None,
                     **trace_kwargs) -> CoverageGrid:
    """
    10·log10(P_tx·Σ|α|²) + 30 por celda; NaN donde no llega ningún camino,
    incluida la celda cuyo centro coincide con el transmisor.
    """
    centers = spec.cell_centers()
    ny, nx = spec.shape
    flat = centers.reshape(-1, 3)
    inside = np.array([scene.contains(p) for p in flat])
    if not inside.any():
        raise InvalidArgumentError(f"coverage: la rejilla '{spec.grid_id}' cae fuera de la escena")

    values = np.full(ny * nx, NO_COVERAGE)
    counts = np.zeros(ny * nx, dtype=np.int64)
    idx = np.flatnonzero(inside)
    per_cell = trace_paths(scene, bvh, tx.position, flat[idx], policy, launch, capture_radius,
                           stats=stats, **trace_kwargs)
    for cell, paths in zip(idx, per_cell):
        energy = sum(abs(p.gain) ** 2 for p in paths)
        counts[cell] = len(paths)
        if energy > 0:
            values[cell] = 10.0 * math.log10(tx.tx_power_w * energy) + 30.0
    log.info("Cobertura '%s': %d/%d celdas con señal", spec.grid_id, int((counts > 0).sum()), ny * nx)
    return CoverageGrid(spec, values.reshape(ny, nx), path_counts=counts.reshape(ny, nx))


def rasterize(grid: CoverageGrid, palette: str = 'viridis',
              db_range: Optional[Tuple[float, float]] = None) -> bytes:
    """
    PPM binario. Fila 0 de la imagen = mayor v (norte arriba). El color es
    palette((valor − lo)/(hi − lo)) recortado a [0, 1]; celdas sin cobertura en negro.
    """
    if db_range is None:
        finite = grid.values[grid.covered]
        db_range = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
        if db_range[0] >= db_range[1]:
            db_range = (db_range[0], db_range[0] + 1.0)
    lo, hi = db_range
    if not lo < hi:
        raise InvalidArgumentError("coverage: el rango de dB necesita min < max")
    cmap = colormaps[palette]
    vals = grid.values[::-1]
    t = np.clip((np.nan_to_num(vals, nan=lo) - lo) / (hi - lo), 0.0, 1.0)
    rgb = cmap(t, bytes=True)[..., :3].astype(np.uint8)
    rgb[np.isnan(vals)] = 0
    ny, nx = vals.shape
    return f"P6\n{nx} {ny}\n255\n".encode('ascii') + rgb.tobytes()


def write_coverage_csv(grid: CoverageGrid) -> str:
    centers = grid.spec.cell_centers()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator='\n')
    w.writerow(CSV_HEADER)
    ny, nx = grid.spec.shape
    for j in range(ny):
        for i in range(nx):
            x, y, z = centers[j, i]
            w.writerow([i, j, repr(float(x)), repr(float(y)), repr(float(z)), repr(float(grid.values[j, i]))])
    return buf.getvalue()


def read_coverage_csv(text: str, spec: GridSpec) -> CoverageGrid:
    values = np.full(spec.shape, NO_COVERAGE)
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != CSV_HEADER:
        raise InvalidArgumentError("coverage: cabecera CSV inesperada")
    for row in reader:
        values[int(row['cell_y']), int(row['cell_x'])] = float(row['power_dBm'])
    return CoverageGrid(spec, values)
