#!/usr/bin/env python3
"""
Módulo: ray_engine.py
Ubicación: channel_twin/

Lanzamiento, aceleración y recorrido de rayos:
- fibonacci_directions / biased_directions → direcciones de lanzamiento.
- nested_launch              → añade retículas de M/4, M/16... para que más rayos nunca pierdan caminos.
- build_bvh / Bvh            → jerarquía de volúmenes (SAH por bins, ≤4 triángulos por hoja).
- nearest_hit / nearest_hits → intersección más cercana (estrategia voraz).
- brute_force_hits           → misma consulta sin BVH (oráculo de pruebas).
- walk_ray                   → recorrido especular escalar de un Ray con amplitud encadenada.
- find_wedges                → aristas convexas compartidas, base de la difracción.
- trace_paths                → caminos exactos tx→rx: marcha vectorizada para candidatos,
                               refinamiento por imágenes y validación contra el BVH.

Los rayos se procesan por bloques de tamaño fijo; los candidatos se unen en un
conjunto y se ordenan, así el resultado no depende del número de hilos.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from . import em_interactions as em
from .devices import (
    RisPanel,
    angles_from_direction,
    apply_ris_to_path,
    doppler_shift,
)
from .errors import InvalidArgumentError
from .scene_model import SPEED_OF_LIGHT, Scene

log = logging.getLogger(__name__)

GOLDEN_RATIO = (1.0 + math.sqrt(5.0)) / 2.0
DEFAULT_CAPTURE_RADIUS = 0.5
SELF_HIT_EPS = 1e-6
PATH_TOLERANCE = 1e-6
MIN_SEGMENT = 1e-9
RAY_CHUNK = 4096
RX_CHUNK = 256
LEAF_SIZE = 4
SAH_BINS = 12

KIND_CODES = {1: 'reflection', 2: 'transmission'}
Signature = Tuple[Tuple[str, int], ...]


# ── Tipos ───────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class InteractionEvent:
    kind: str
    point: Tuple[float, float, float]
    object: str
    surface: int
    incident_angle: float
    segment_length: float
    power: float = 0.0

    def __post_init__(self):
        if not self.segment_length > 0:
            raise InvalidArgumentError("ray_engine: tramo de longitud no positiva")


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    accumulated_length: float = 0.0
    amplitude: complex = 1.0 + 0j
    interaction_log: List[InteractionEvent] = field(default_factory=list)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        d = np.asarray(self.direction, dtype=float)
        if abs(np.linalg.norm(d) - 1.0) > 1e-12:
            raise InvalidArgumentError("ray_engine: dirección no unitaria")
        self.direction = d

    @property
    def interaction_count(self) -> int:
        return len(self.interaction_log)


@dataclass(frozen=True)
class TerminationPolicy:
    max_interactions: int
    min_power: float

    def __post_init__(self):
        if int(self.max_interactions) != self.max_interactions or self.max_interactions < 1:
            raise InvalidArgumentError("ray_engine: max_interactions debe ser ≥ 1")
        if not self.min_power > 0:
            raise InvalidArgumentError("ray_engine: min_power debe ser > 0")


@dataclass
class PathRecord:
    gain: complex
    delay: float
    aod: Tuple[float, float]
    aoa: Tuple[float, float]
    doppler: float = 0.0
    interactions: Tuple[InteractionEvent, ...] = ()
    length: float = 0.0
    polarization: np.ndarray = field(default_factory=lambda: np.eye(2, dtype=complex))
    signature: Signature = ()

    @property
    def interaction_count(self) -> int:
        return len(self.interactions)


@dataclass
class Hit:
    triangle: int
    point: np.ndarray
    normal: np.ndarray
    distance: float


@dataclass
class TraceStats:
    rays_launched: int = 0
    segments_traced: int = 0
    candidates: int = 0
    paths: int = 0

    def merge(self, other: 'TraceStats') -> None:
        self.rays_launched += other.rays_launched
        self.segments_traced += other.segments_traced


# ── Direcciones de lanzamiento ──────────────────────────────────────────────

def _spherical(theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def fibonacci_directions(count: int) -> np.ndarray:
    """θ_k = arccos(1 − 2(k+½)/M), φ_k = 2πk/Φ_G."""
    if count < 1:
        raise InvalidArgumentError("ray_engine: se necesita al menos una dirección")
    k = np.arange(count, dtype=float)
    theta = np.arccos(1.0 - 2.0 * (k + 0.5) / count)
    phi = 2.0 * math.pi * k / GOLDEN_RATIO
    return _spherical(theta, phi)


def biased_directions(count: int, elevation_band: Tuple[float, float], fraction: float) -> np.ndarray:
    """
    round(fraction·count) direcciones Fibonacci dentro de la banda polar
    [θ_lo, θ_hi]; el resto cubre la esfera completa.
    """
    lo, hi = elevation_band
    if not (0.0 <= lo < hi <= math.pi):
        raise InvalidArgumentError("ray_engine: banda de elevación vacía o fuera de [0, π]")
    if not 0.0 <= fraction <= 1.0:
        raise InvalidArgumentError("ray_engine: fraction fuera de [0, 1]")
    if count < 1:
        raise InvalidArgumentError("ray_engine: se necesita al menos una dirección")
    n_band = int(round(fraction * count))
    parts = []
    if n_band:
        k = np.arange(n_band, dtype=float)
        z_lo, z_hi = math.cos(lo), math.cos(hi)
        z = z_lo - (z_lo - z_hi) * (k + 0.5) / n_band
        parts.append(_spherical(np.arccos(z), 2.0 * math.pi * k / GOLDEN_RATIO))
    if count - n_band:
        parts.append(fibonacci_directions(count - n_band))
    return np.concatenate(parts, axis=0)


def nested_launch(launch) -> np.ndarray:
    """
    `launch` seguido de las retículas de Fibonacci de M/4, M/16, ... hasta un
    rayo. La marcha con 4M contiene la de M, así que los candidatos hallados
    solo crecen con el número de rayos.
    """
    launch = np.asarray(launch, dtype=float).reshape(-1, 3)
    levels = [launch]
    count = len(launch) // 4
    while count >= 1:
        levels.append(fibonacci_directions(count))
        count //= 4
    return np.concatenate(levels, axis=0)


# ── BVH ─────────────────────────────────────────────────────────────────────

@dataclass
class Bvh:
    node_min: np.ndarray
    node_max: np.ndarray
    left: np.ndarray
    right: np.ndarray
    first: np.ndarray
    count: np.ndarray
    tri_index: np.ndarray
    v0: np.ndarray
    e1: np.ndarray
    e2: np.ndarray

    @property
    def node_count(self) -> int:
        return len(self.left)

    @property
    def triangle_count(self) -> int:
        return len(self.tri_index)

    def check(self) -> bool:
        """Cada triángulo aparece una vez y cada caja contiene a sus hijas."""
        seen = np.concatenate([self.tri_index[f:f + c] for f, c in zip(self.first, self.count) if c > 0])
        if sorted(seen.tolist()) != list(range(len(self.v0))):
            return False
        for i in range(self.node_count):
            for child in (self.left[i], self.right[i]):
                if child < 0:
                    continue
                if np.any(self.node_min[child] < self.node_min[i]) or np.any(self.node_max[child] > self.node_max[i]):
                    return False
        return True


def _area(lo: np.ndarray, hi: np.ndarray) -> float:
    d = np.maximum(hi - lo, 0.0)
    return 2.0 * (d[0] * d[1] + d[1] * d[2] + d[2] * d[0])


def _sah_split(centroids: np.ndarray, tmin: np.ndarray, tmax: np.ndarray) -> Optional[Tuple[int, np.ndarray]]:
    """Devuelve (eje, máscara izquierda) de menor coste SAH o None."""
    cmin, cmax = centroids.min(axis=0), centroids.max(axis=0)
    extent = cmax - cmin
    best_cost, best = math.inf, None
    for axis in range(3):
        if extent[axis] < 1e-12:
            continue
        b = ((centroids[:, axis] - cmin[axis]) / extent[axis] * SAH_BINS).astype(int)
        b = np.clip(b, 0, SAH_BINS - 1)
        counts = np.bincount(b, minlength=SAH_BINS)
        lo = np.full((SAH_BINS, 3), np.inf)
        hi = np.full((SAH_BINS, 3), -np.inf)
        np.minimum.at(lo, b, tmin)
        np.maximum.at(hi, b, tmax)
        for split in range(1, SAH_BINS):
            nl, nr = counts[:split].sum(), counts[split:].sum()
            if nl == 0 or nr == 0:
                continue
            cost = (nl * _area(lo[:split].min(axis=0), hi[:split].max(axis=0))
                    + nr * _area(lo[split:].min(axis=0), hi[split:].max(axis=0)))
            if cost < best_cost:
                best_cost, best = cost, (axis, b < split)
    return best


def build_bvh(scene: Scene) -> Bvh:
    verts = scene.vertices
    if len(verts) == 0:
        raise InvalidArgumentError("ray_engine: la escena no tiene triángulos")
    tmin, tmax = verts.min(axis=1), verts.max(axis=1)
    centroids = verts.mean(axis=1)
    order = np.arange(len(verts))

    node_min: List[np.ndarray] = [None]
    node_max: List[np.ndarray] = [None]
    left, right, first, count = [-1], [-1], [0], [0]
    stack = [(0, 0, len(verts))]
    while stack:
        node, start, end = stack.pop()
        idx = order[start:end]
        pad = 1e-9 * (1.0 + np.abs(tmin[idx]).max())
        node_min[node] = tmin[idx].min(axis=0) - pad
        node_max[node] = tmax[idx].max(axis=0) + pad
        n = end - start
        if n <= LEAF_SIZE:
            first[node], count[node] = start, n
            continue
        split = _sah_split(centroids[idx], tmin[idx], tmax[idx])
        if split is None:
            # centroides coincidentes: partición por la mitad en orden estable
            mask = np.zeros(n, dtype=bool)
            mask[: n // 2] = True
        else:
            mask = split[1]
        order[start:end] = np.concatenate([idx[mask], idx[~mask]])
        mid = start + int(mask.sum())
        for _ in range(2):
            node_min.append(None)
            node_max.append(None)
            left.append(-1)
            right.append(-1)
            first.append(0)
            count.append(0)
        l_node, r_node = len(left) - 2, len(left) - 1
        left[node], right[node] = l_node, r_node
        stack.append((r_node, mid, end))
        stack.append((l_node, start, mid))

    bvh = Bvh(
        node_min=np.asarray(node_min), node_max=np.asarray(node_max),
        left=np.asarray(left, dtype=np.int64), right=np.asarray(right, dtype=np.int64),
        first=np.asarray(first, dtype=np.int64), count=np.asarray(count, dtype=np.int64),
        tri_index=order.astype(np.int64),
        v0=verts[:, 0].copy(), e1=verts[:, 1] - verts[:, 0], e2=verts[:, 2] - verts[:, 0],
    )
    log.debug("BVH: %d nodos sobre %d triángulos", bvh.node_count, len(verts))
    return bvh


def _moller_trumbore(bvh: Bvh, origins: np.ndarray, dirs: np.ndarray, tris: np.ndarray) -> np.ndarray:
    e1, e2 = bvh.e1[tris], bvh.e2[tris]
    pvec = np.cross(dirs, e2)
    det = np.einsum('ij,ij->i', e1, pvec)
    parallel = np.abs(det) < 1e-14
    inv_det = 1.0 / np.where(parallel, 1.0, det)
    tvec = origins - bvh.v0[tris]
    u = np.einsum('ij,ij->i', tvec, pvec) * inv_det
    qvec = np.cross(tvec, e1)
    v = np.einsum('ij,ij->i', dirs, qvec) * inv_det
    t = np.einsum('ij,ij->i', e2, qvec) * inv_det
    eps = 1e-9
    ok = ~parallel & (u >= -eps) & (v >= -eps) & (u + v <= 1.0 + eps)
    return np.where(ok, t, np.inf)


def _keep_best(best_t, best_tri, rays, t, tris) -> None:
    """Actualiza el mejor impacto por rayo: menor t y, a igualdad, menor id."""
    if rays.size == 0:
        return
    order = np.lexsort((tris, t, rays))
    rays, t, tris = rays[order], t[order], tris[order]
    head = np.r_[True, rays[1:] != rays[:-1]]
    rays, t, tris = rays[head], t[head], tris[head]
    better = (t < best_t[rays]) | ((t == best_t[rays]) & (tris < best_tri[rays]))
    best_t[rays[better]] = t[better]
    best_tri[rays[better]] = tris[better]


def nearest_hits(bvh: Optional[Bvh], origins, dirs, t_min: float = 0.0,
                 t_max=np.inf) -> Tuple[np.ndarray, np.ndarray]:
    """Versión por lotes: (triángulo o −1, distancia o inf) por rayo."""
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    n_rays = len(origins)
    best_t = np.full(n_rays, np.inf)
    best_tri = np.full(n_rays, -1, dtype=np.int64)
    if bvh is None or n_rays == 0:
        return best_tri, best_t
    limit = np.broadcast_to(np.asarray(t_max, dtype=float), (n_rays,))
    safe = np.where(np.abs(dirs) < 1e-15, np.copysign(1e-15, dirs), dirs)
    inv = 1.0 / safe

    ray_idx = np.arange(n_rays)
    node_idx = np.zeros(n_rays, dtype=np.int64)
    while ray_idx.size:
        o, iv = origins[ray_idx], inv[ray_idx]
        t1 = (bvh.node_min[node_idx] - o) * iv
        t2 = (bvh.node_max[node_idx] - o) * iv
        t_near = np.minimum(t1, t2).max(axis=1)
        t_far = np.maximum(t1, t2).min(axis=1)
        keep = ((t_far >= np.maximum(t_near, t_min)) & (t_near <= best_t[ray_idx])
                & (t_near <= limit[ray_idx]))
        ray_idx, node_idx = ray_idx[keep], node_idx[keep]
        leaf = bvh.left[node_idx] < 0
        lr, ln = ray_idx[leaf], node_idx[leaf]
        if lr.size:
            reps = bvh.count[ln]
            pr = np.repeat(lr, reps)
            starts = np.repeat(bvh.first[ln], reps)
            offsets = np.arange(reps.sum()) - np.repeat(np.cumsum(reps) - reps, reps)
            tris = bvh.tri_index[starts + offsets]
            t = _moller_trumbore(bvh, origins[pr], dirs[pr], tris)
            ok = (t > t_min) & (t < limit[pr])
            _keep_best(best_t, best_tri, pr[ok], t[ok], tris[ok])
        inner = ~leaf
        ray_idx = np.concatenate([ray_idx[inner], ray_idx[inner]])
        node_idx = np.concatenate([bvh.left[node_idx[inner]], bvh.right[node_idx[inner]]])
    return best_tri, best_t


def brute_force_hits(bvh: Bvh, origins, dirs, t_min: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    """Recorre todos los triángulos con el mismo núcleo; referencia para el BVH."""
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    n_rays, n_tris = len(origins), len(bvh.v0)
    best_t = np.full(n_rays, np.inf)
    best_tri = np.full(n_rays, -1, dtype=np.int64)
    rays = np.repeat(np.arange(n_rays), n_tris)
    tris = np.tile(np.arange(n_tris), n_rays)
    t = _moller_trumbore(bvh, origins[rays], dirs[rays], tris)
    ok = t > t_min
    _keep_best(best_t, best_tri, rays[ok], t[ok], tris[ok])
    return best_tri, best_t


def _tri_normal(bvh: Bvh, tri: int) -> np.ndarray:
    n = np.cross(bvh.e1[tri], bvh.e2[tri])
    return n / np.linalg.norm(n)


def nearest_hit(bvh: Optional[Bvh], origin, direction, t_min: float = 0.0) -> Optional[Hit]:
    """Intersección más cercana con distancia > t_min; normal opuesta al rayo."""
    tri, t = nearest_hits(bvh, origin, direction, t_min)
    if tri[0] < 0:
        return None
    d = np.asarray(direction, dtype=float)
    n = _tri_normal(bvh, int(tri[0]))
    if n @ d > 0:
        n = -n
    point = np.asarray(origin, dtype=float) + t[0] * d
    return Hit(triangle=int(tri[0]), point=point, normal=n, distance=float(t[0]))


# ── Recorrido escalar ───────────────────────────────────────────────────────

def walk_ray(scene: Scene, bvh: Optional[Bvh], ray: Ray, policy: TerminationPolicy,
             tx_power: float = 1.0) -> Ray:
    """
    Sigue un rayo por reflexión especular voraz hasta agotar N_max, perder
    potencia (P ≤ P_min) o salir de la escena. La amplitud se encadena tramo a
    tramo con α·Γ·e^{−jkd}/d.
    """
    lam = scene.wavelength
    aperture = (lam / (4.0 * math.pi)) ** 2
    while ray.interaction_count < policy.max_interactions:
        hit = nearest_hit(bvh, ray.origin, ray.direction, SELF_HIT_EPS)
        if hit is None:
            break
        obj = scene.objects[int(scene.tri_object[hit.triangle])]
        theta = float(em.incidence_angle(ray.direction, hit.normal)[0])
        n2 = obj.material.refractive_index(scene.frequency)
        gamma = em.fresnel_perp(em.InterfaceGeometry(theta, 1.0, n2, lam))
        ray.amplitude = em.update_amplitude(ray.amplitude, gamma, hit.distance, lam)
        ray.accumulated_length += hit.distance
        power = tx_power * aperture * abs(ray.amplitude) ** 2
        ray.interaction_log.append(InteractionEvent(
            kind='reflection', point=tuple(hit.point), object=obj.name,
            surface=int(scene.surface_id[hit.triangle]), incident_angle=theta,
            segment_length=hit.distance, power=power))
        ray.origin = hit.point
        ray.direction = em.reflect_direction(ray.direction, hit.normal)
        if power <= policy.min_power or obj.ris:
            break
    return ray


# ── Cuñas ───────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Wedge:
    id: int
    start: Tuple[float, float, float]
    end: Tuple[float, float, float]
    geometry: em.WedgeGeometry
    surfaces: Tuple[int, int]
    object: str

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.subtract(self.end, self.start)))


def find_wedges(scene: Scene) -> List[Wedge]:
    """
    Aristas compartidas por exactamente dos triángulos de superficies distintas
    y no coplanares, convexas según el sentido de giro (la normal apunta al
    exterior).
    """
    verts = scene.vertices
    edges: Dict[tuple, List[Tuple[int, int]]] = {}
    for t, tri in enumerate(verts):
        keys = [tuple(np.round(v, 9)) for v in tri]
        for i in range(3):
            a, b = keys[i], keys[(i + 1) % 3]
            edges.setdefault(tuple(sorted((a, b))), []).append((t, (i + 2) % 3))
    normals = scene.tri_normals
    wedges: List[Wedge] = []
    for (a, b), owners in sorted(edges.items()):
        if len(owners) != 2:
            continue
        (t0, k0), (t1, k1) = owners
        s0, s1 = int(scene.surface_id[t0]), int(scene.surface_id[t1])
        if s0 == s1:
            continue
        pa, pb = np.asarray(a), np.asarray(b)
        e = (pb - pa) / np.linalg.norm(pb - pa)
        w0, w1 = verts[t0, k0], verts[t1, k1]
        n0, n1 = normals[t0], normals[t1]
        if not ((w1 - pa) @ n0 < -1e-9 and (w0 - pa) @ n1 < -1e-9):
            continue
        d0 = (w0 - pa) - ((w0 - pa) @ e) * e
        d1 = (w1 - pa) - ((w1 - pa) @ e) * e
        d0, d1 = d0 / np.linalg.norm(d0), d1 / np.linalg.norm(d1)
        interior = math.acos(max(-1.0, min(1.0, float(d0 @ d1))))
        geom = em.WedgeGeometry(interior, tuple(e), tuple(d0), tuple(n0))
        obj = scene.objects[int(scene.tri_object[t0])].name
        wedges.append(Wedge(len(wedges), tuple(pa), tuple(pb), geom, (s0, s1), obj))
    return wedges


# ── Trazado ─────────────────────────────────────────────────────────────────

def polarization_basis(direction) -> Tuple[np.ndarray, np.ndarray]:
    """(θ̂, φ̂) esféricos de la dirección de propagación."""
    d = np.asarray(direction, dtype=float)
    theta = math.acos(max(-1.0, min(1.0, d[2])))
    phi = math.atan2(d[1], d[0])
    th = np.array([math.cos(theta) * math.cos(phi), math.cos(theta) * math.sin(phi), -math.sin(theta)])
    ph = np.array([-math.sin(phi), math.cos(phi), 0.0])
    return th, ph


def _batch_basis(dirs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    theta = np.arccos(np.clip(dirs[:, 2], -1.0, 1.0))
    phi = np.arctan2(dirs[:, 1], dirs[:, 0])
    th = np.stack([np.cos(theta) * np.cos(phi), np.cos(theta) * np.sin(phi), -np.sin(theta)], axis=-1)
    ph = np.stack([-np.sin(phi), np.cos(phi), np.zeros_like(phi)], axis=-1)
    return th, ph


POLARIZATIONS = {'V': np.array([1.0, 0.0]), 'H': np.array([0.0, 1.0])}


@dataclass
class _Context:
    scene: Scene
    bvh: Optional[Bvh]
    tx: np.ndarray
    rx: np.ndarray
    policy: Optional[TerminationPolicy]
    capture_radius: float
    tx_power: float
    p_tx: np.ndarray
    p_rx: np.ndarray
    wavelength: float
    obj_index: np.ndarray
    obj_pec: np.ndarray
    obj_ris: np.ndarray
    surface_normal: np.ndarray
    surface_offset: np.ndarray


def _make_context(scene, bvh, tx, rx_set, policy, capture_radius, tx_power, polarization) -> _Context:
    mats = [o.material.refractive_index(scene.frequency) for o in scene.objects]
    n_surf = len(scene.surface_object)
    s_normal = np.zeros((n_surf, 3))
    s_offset = np.zeros(n_surf)
    if n_surf:
        first_tri = np.full(n_surf, -1)
        for t in range(len(scene.surface_id) - 1, -1, -1):
            first_tri[scene.surface_id[t]] = t
        s_normal = scene.tri_normals[first_tri]
        s_offset = np.einsum('ij,ij->i', s_normal, scene.vertices[first_tri, 0])
    return _Context(
        scene=scene, bvh=bvh, tx=np.asarray(tx, dtype=float),
        rx=np.atleast_2d(np.asarray(rx_set, dtype=float)).reshape(-1, 3),
        policy=policy, capture_radius=capture_radius, tx_power=tx_power,
        p_tx=POLARIZATIONS[polarization[0]], p_rx=POLARIZATIONS[polarization[1]],
        wavelength=scene.wavelength,
        obj_index=np.asarray(mats, dtype=complex),
        obj_pec=np.asarray([o.material.is_pec for o in scene.objects], dtype=bool),
        obj_ris=np.asarray([o.ris for o in scene.objects], dtype=bool),
        surface_normal=s_normal, surface_offset=s_offset,
    )


def _capture(ctx: _Context, origins, dirs, t_hit, kinds, surfs, depth, found: Set) -> None:
    """Registra (receptor, firma) para cada tramo que pasa a menos del radio de captura."""
    r2 = ctx.capture_radius ** 2
    for start in range(0, len(ctx.rx), RX_CHUNK):
        rx = ctx.rx[start:start + RX_CHUNK]
        v = rx[None, :, :] - origins[:, None, :]
        tp = np.einsum('rkj,rj->rk', v, dirs)
        perp2 = np.einsum('rkj,rkj->rk', v, v) - tp ** 2
        ri, ki = np.nonzero((tp > 0) & (tp < t_hit[:, None]) & (perp2 <= r2))
        if ri.size == 0:
            continue
        rows = np.concatenate([(ki + start)[:, None], depth[ri][:, None], kinds[ri], surfs[ri]], axis=1)
        width = kinds.shape[1]
        for row in np.unique(rows, axis=0):
            d = int(row[1])
            sig = tuple((KIND_CODES[int(row[2 + i])], int(row[2 + width + i])) for i in range(d))
            found.add((int(row[0]), sig))


def _march_chunk(ctx: _Context, dirs: np.ndarray) -> Tuple[Set, TraceStats]:
    """Marcha un bloque de rayos con ramificación reflexión + transmisión."""
    stats = TraceStats(rays_launched=len(dirs))
    found: Set = set()
    n_max = ctx.policy.max_interactions
    lam = ctx.wavelength
    aperture = ctx.tx_power * (lam / (4.0 * math.pi)) ** 2
    th, ph = _batch_basis(dirs)

    origins = np.repeat(ctx.tx[None, :], len(dirs), axis=0)
    field_ = (ctx.p_tx[0] * th + ctx.p_tx[1] * ph).astype(complex)
    length = np.zeros(len(dirs))
    depth = np.zeros(len(dirs), dtype=np.int64)
    branch = np.ones(len(dirs), dtype=bool)
    kinds = np.zeros((len(dirs), n_max), dtype=np.int64)
    surfs = np.full((len(dirs), n_max), -1, dtype=np.int64)

    while len(origins):
        tri, t = nearest_hits(ctx.bvh, origins, dirs, SELF_HIT_EPS)
        stats.segments_traced += len(origins)
        _capture(ctx, origins, dirs, t, kinds, surfs, depth, found)

        obj = ctx.scene.tri_object[np.maximum(tri, 0)]
        ok = branch & (tri >= 0) & ~ctx.obj_ris[obj]
        if not np.any(ok):
            break
        sel = np.flatnonzero(ok)
        tri_s, obj_s = tri[sel], obj[sel]
        d = dirs[sel]
        point = origins[sel] + t[sel, None] * d
        normal = ctx.scene.tri_normals[tri_s]
        normal = np.where((np.einsum('ij,ij->i', normal, d) > 0)[:, None], -normal, normal)
        theta = em.incidence_angle(d, normal)
        n2 = ctx.obj_index[obj_s]
        geom = em.InterfaceGeometry(theta, np.ones_like(n2), n2, lam)
        g_perp, g_par = np.atleast_1d(em.fresnel_perp(geom)), np.atleast_1d(em.fresnel_par(geom))
        r_dir, r_field = em.reflect_field(field_[sel], d, normal, g_perp, g_par)
        new_len = length[sel] + t[sel]
        surf = ctx.scene.surface_id[tri_s]

        children = [(point, r_dir, r_field, 1)]
        trans = ~ctx.obj_pec[obj_s]
        if np.any(trans):
            t_perp, t_par = em.transmission_coeffs(geom)
            t_field = em.transmit_field(field_[sel], d, normal, np.atleast_1d(t_perp), np.atleast_1d(t_par))
            children.append((point, d, t_field, 2))

        nxt = {k: [] for k in ('o', 'd', 'f', 'l', 'dep', 'b', 'k', 's')}
        for c_point, c_dir, c_field, code in children:
            keep = trans if code == 2 else np.ones(len(sel), dtype=bool)
            power = aperture * np.sum(np.abs(c_field) ** 2, axis=1) / new_len ** 2
            c_depth = depth[sel] + 1
            k_arr = kinds[sel].copy()
            s_arr = surfs[sel].copy()
            rows = np.arange(len(sel))
            k_arr[rows, depth[sel]] = code
            s_arr[rows, depth[sel]] = surf
            nxt['o'].append(c_point[keep])
            nxt['d'].append(c_dir[keep])
            nxt['f'].append(c_field[keep])
            nxt['l'].append(new_len[keep])
            nxt['dep'].append(c_depth[keep])
            nxt['b'].append(((c_depth < n_max) & (power > ctx.policy.min_power))[keep])
            nxt['k'].append(k_arr[keep])
            nxt['s'].append(s_arr[keep])
        origins = np.concatenate(nxt['o'])
        dirs = np.concatenate(nxt['d'])
        field_ = np.concatenate(nxt['f'])
        length = np.concatenate(nxt['l'])
        depth = np.concatenate(nxt['dep'])
        branch = np.concatenate(nxt['b'])
        kinds = np.concatenate(nxt['k'])
        surfs = np.concatenate(nxt['s'])
    return found, stats


def _mirror(point: np.ndarray, normal: np.ndarray, offset: float) -> np.ndarray:
    return point - 2.0 * (point @ normal - offset) * normal


def _plane_param(a: np.ndarray, b: np.ndarray, normal: np.ndarray, offset: float) -> Optional[float]:
    denom = normal @ (b - a)
    if abs(denom) < 1e-15:
        return None
    return float((offset - normal @ a) / denom)


def _refine(ctx: _Context, sig: Signature, rx: np.ndarray) -> Optional[List[np.ndarray]]:
    """Vértices exactos tx, X_1..X_m, rx por el método de imágenes."""
    refl = [(i, s) for i, (k, s) in enumerate(sig) if k == 'reflection']
    images = [ctx.tx]
    for _, s in refl:
        images.append(_mirror(images[-1], ctx.surface_normal[s], ctx.surface_offset[s]))
    refl_points: List[np.ndarray] = [None] * len(refl)
    target = rx
    for j in range(len(refl) - 1, -1, -1):
        s = refl[j][1]
        u = _plane_param(images[j + 1], target, ctx.surface_normal[s], ctx.surface_offset[s])
        if u is None or not (1e-12 < u < 1.0 - 1e-12):
            return None
        target = images[j + 1] + u * (target - images[j + 1])
        refl_points[j] = target

    anchors = [ctx.tx] + refl_points + [rx]
    anchor_pos = [-1] + [i for i, _ in refl] + [len(sig)]
    vertices: List[np.ndarray] = [ctx.tx]
    for seg in range(len(anchors) - 1):
        a, b = anchors[seg], anchors[seg + 1]
        last_u = 0.0
        for i in range(anchor_pos[seg] + 1, anchor_pos[seg + 1]):
            s = sig[i][1]
            u = _plane_param(a, b, ctx.surface_normal[s], ctx.surface_offset[s])
            if u is None or not (last_u + 1e-12 < u < 1.0 - 1e-12):
                return None
            last_u = u
            vertices.append(a + u * (b - a))
        vertices.append(b)
    if any(np.linalg.norm(vertices[i + 1] - vertices[i]) < MIN_SEGMENT for i in range(len(vertices) - 1)):
        return None

    for i, (kind, s) in enumerate(sig):
        n, off = ctx.surface_normal[s], ctx.surface_offset[s]
        before = vertices[i] @ n - off
        after = vertices[i + 2] @ n - off
        same_side = before * after > 0
        if (kind == 'reflection') != same_side:
            return None
    return vertices


def _legs_clear(ctx: _Context, legs: List[Tuple[np.ndarray, np.ndarray, int]]) -> np.ndarray:
    """
    Valida tramos (a, b, superficie esperada o −1) en un solo lote: el primer
    impacto debe ser la superficie esperada justo en b, o no existir antes de b.
    """
    if not legs:
        return np.zeros(0, dtype=bool)
    a = np.asarray([l[0] for l in legs])
    b = np.asarray([l[1] for l in legs])
    want = np.asarray([l[2] for l in legs])
    span = np.linalg.norm(b - a, axis=1)
    dirs = (b - a) / span[:, None]
    tri, t = nearest_hits(ctx.bvh, a, dirs, SELF_HIT_EPS)
    tol = PATH_TOLERANCE * np.maximum(1.0, span)
    surf = np.full(len(tri), -1, dtype=np.int64)
    if ctx.bvh is not None:
        surf = np.where(tri >= 0, ctx.scene.surface_id[np.maximum(tri, 0)], -1)
    free = t >= span - tol
    on_target = (np.abs(t - span) <= tol) & (surf == want)
    return np.where(want < 0, free, on_target)


def _path_fields(ctx: _Context, vertices: List[np.ndarray], sig: Signature):
    """Propaga los campos θ̂/φ̂ de salida; devuelve (matriz 2×2, eventos, dirección final)."""
    lam = ctx.wavelength
    aperture = ctx.tx_power * (lam / (4.0 * math.pi)) ** 2
    dirs = [(vertices[i + 1] - vertices[i]) / np.linalg.norm(vertices[i + 1] - vertices[i])
            for i in range(len(vertices) - 1)]
    th, ph = polarization_basis(dirs[0])
    fields = np.stack([th, ph]).astype(complex)
    events: List[InteractionEvent] = []
    travelled = 0.0
    for i, (kind, s) in enumerate(sig):
        seg = float(np.linalg.norm(vertices[i + 1] - vertices[i]))
        travelled += seg
        obj = int(ctx.scene.surface_object[s])
        d = dirs[i]
        n = ctx.surface_normal[s]
        if n @ d > 0:
            n = -n
        theta = float(em.incidence_angle(d, n)[0])
        geom = em.InterfaceGeometry(theta, 1.0, ctx.obj_index[obj], lam)
        dd = np.repeat(d[None, :], 2, axis=0)
        nn = np.repeat(n[None, :], 2, axis=0)
        if kind == 'reflection':
            _, fields = em.reflect_field(fields, dd, nn, em.fresnel_perp(geom), em.fresnel_par(geom))
        else:
            t_perp, t_par = em.transmission_coeffs(geom)
            fields = em.transmit_field(fields, dd, nn, t_perp, t_par)
        e_cfg = ctx.p_tx[0] * fields[0] + ctx.p_tx[1] * fields[1]
        power = aperture * float(np.sum(np.abs(e_cfg) ** 2)) / travelled ** 2
        events.append(InteractionEvent(kind, tuple(float(c) for c in vertices[i + 1]),
                                       ctx.scene.objects[obj].name, int(s), theta, seg, power))
    rth, rph = polarization_basis(dirs[-1])
    matrix = np.array([[rth @ fields[0], rth @ fields[1]], [rph @ fields[0], rph @ fields[1]]])
    return matrix, events, dirs


def _make_record(ctx: _Context, matrix: np.ndarray, events, first_dir, last_dir, length: float,
                 spreading: float, sig: Signature, tx_vel, rx_vel) -> PathRecord:
    lam = ctx.wavelength
    k = 2.0 * math.pi / lam
    proj = complex(ctx.p_rx @ matrix @ ctx.p_tx)
    gain = (lam / (4.0 * math.pi)) * proj * np.exp(-1j * k * length) * spreading
    aoa_dir = -np.asarray(last_dir)
    doppler = 0.0
    if tx_vel is not None or rx_vel is not None:
        doppler = doppler_shift(first_dir, aoa_dir,
                                np.zeros(3) if tx_vel is None else tx_vel,
                                np.zeros(3) if rx_vel is None else rx_vel, lam)
    return PathRecord(gain=complex(gain), delay=length / SPEED_OF_LIGHT,
                      aod=angles_from_direction(first_dir), aoa=angles_from_direction(aoa_dir),
                      doppler=doppler, interactions=tuple(events), length=length,
                      polarization=matrix, signature=sig)


def _specular_paths(ctx: _Context, candidates: List[Tuple[int, Signature]], tx_vel, rx_vels) -> Dict[int, List[PathRecord]]:
    geo = []
    legs: List[Tuple[np.ndarray, np.ndarray, int]] = []
    for rx_i, sig in candidates:
        verts = _refine(ctx, sig, ctx.rx[rx_i])
        if verts is None:
            continue
        start = len(legs)
        for i in range(len(verts) - 1):
            legs.append((verts[i], verts[i + 1], sig[i][1] if i < len(sig) else -1))
        geo.append((rx_i, sig, verts, start, len(legs)))
    clear = _legs_clear(ctx, legs)

    out: Dict[int, List[PathRecord]] = {}
    for rx_i, sig, verts, a, b in geo:
        if not clear[a:b].all():
            continue
        matrix, events, dirs = _path_fields(ctx, verts, sig)
        if ctx.policy is not None and any(e.power <= ctx.policy.min_power for e in events[:-1]):
            log.debug("Camino %s descartado: potencia bajo P_min", sig)
            continue
        length = float(sum(np.linalg.norm(verts[i + 1] - verts[i]) for i in range(len(verts) - 1)))
        rec = _make_record(ctx, matrix, events, dirs[0], dirs[-1], length, 1.0 / length, sig,
                           tx_vel, None if rx_vels is None else rx_vels[rx_i])
        if abs(rec.gain) == 0.0:
            continue
        out.setdefault(rx_i, []).append(rec)
    return out


def _diffraction_paths(ctx: _Context, wedges: List[Wedge], tx_vel, rx_vels) -> Dict[int, List[PathRecord]]:
    lam = ctx.wavelength
    cands = []
    legs = []
    for w in wedges:
        a = np.asarray(w.start)
        e = np.asarray(w.geometry.edge_dir)
        n_pi = w.geometry.n * math.pi
        phi_src = w.geometry.angle_of(ctx.tx - a)
        if not (1e-6 < phi_src < n_pi - 1e-6):
            continue
        ta = (ctx.tx - a) @ e
        da = np.linalg.norm((ctx.tx - a) - ta * e)
        for rx_i, rx in enumerate(ctx.rx):
            phi_obs = w.geometry.angle_of(rx - a)
            if not (1e-6 < phi_obs < n_pi - 1e-6):
                continue
            tb = (rx - a) @ e
            db = np.linalg.norm((rx - a) - tb * e)
            if da + db < 1e-12:
                continue
            tq = (ta * db + tb * da) / (da + db)
            if not (1e-9 < tq < w.length - 1e-9):
                continue
            q = a + tq * e
            if np.linalg.norm(q - ctx.tx) < MIN_SEGMENT or np.linalg.norm(rx - q) < MIN_SEGMENT:
                continue
            start = len(legs)
            legs.append((ctx.tx, q, None))
            legs.append((q, rx, -1))
            cands.append((w, rx_i, q, start))
    if not cands:
        return {}
    a = np.asarray([l[0] for l in legs])
    b = np.asarray([l[1] for l in legs])
    span = np.linalg.norm(b - a, axis=1)
    dirs = (b - a) / span[:, None]
    _, t = nearest_hits(ctx.bvh, a, dirs, SELF_HIT_EPS)
    clear = t >= span - PATH_TOLERANCE * np.maximum(1.0, span)

    aperture = ctx.tx_power * (lam / (4.0 * math.pi)) ** 2
    out: Dict[int, List[PathRecord]] = {}
    for w, rx_i, q, start in cands:
        if not (clear[start] and clear[start + 1]):
            continue
        rx = ctx.rx[rx_i]
        s_prime = float(np.linalg.norm(q - ctx.tx))
        s = float(np.linalg.norm(rx - q))
        d_in = (q - ctx.tx) / s_prime
        d_out = (rx - q) / s
        th, ph = polarization_basis(d_in)
        fields = np.stack([em.diffract_field(f, w.geometry, d_in, d_out, s_prime, s, lam)
                           for f in (th.astype(complex), ph.astype(complex))])
        rth, rph = polarization_basis(d_out)
        matrix = np.array([[rth @ fields[0], rth @ fields[1]], [rph @ fields[0], rph @ fields[1]]])
        theta = math.acos(min(1.0, abs(float(d_in @ np.asarray(w.geometry.face0_normal)))))
        event = InteractionEvent('diffraction', tuple(float(c) for c in q), w.object, w.id,
                                 theta, s_prime, aperture / s_prime ** 2)
        sig = (('diffraction', w.id),)
        rec = _make_record(ctx, matrix, [event], d_in, d_out, s + s_prime, 1.0 / s_prime, sig,
                           tx_vel, None if rx_vels is None else rx_vels[rx_i])
        if abs(rec.gain) > 0.0:
            out.setdefault(rx_i, []).append(rec)
    return out


def _ris_paths(ctx: _Context, panels: Sequence[RisPanel], tx_vel, rx_vels) -> Dict[int, List[PathRecord]]:
    lam = ctx.wavelength
    scene = ctx.scene
    out: Dict[int, List[PathRecord]] = {}
    aperture = ctx.tx_power * (lam / (4.0 * math.pi)) ** 2
    for panel in panels:
        name = f"ris_{panel.id}"
        obj = next((i for i, o in enumerate(scene.objects) if o.name == name), None)
        if obj is None:
            continue
        surf = int(scene.surface_id[np.flatnonzero(scene.tri_object == obj)[0]])
        c = panel.center
        if np.linalg.norm(c - ctx.tx) < MIN_SEGMENT:
            continue
        legs = [(ctx.tx, c, surf)] + [(c, rx, -1) for rx in ctx.rx]
        clear = _legs_clear(ctx, legs)
        if not clear[0]:
            continue
        s_in = float(np.linalg.norm(c - ctx.tx))
        d_in = (c - ctx.tx) / s_in
        th, ph = polarization_basis(d_in)
        for rx_i, rx in enumerate(ctx.rx):
            if not clear[rx_i + 1]:
                continue
            if np.linalg.norm(rx - c) < MIN_SEGMENT:
                continue
            s_out = float(np.linalg.norm(rx - c))
            d_out = (rx - c) / s_out
            g = apply_ris_to_path(d_in, panel, d_out, lam)
            if g == 0:
                continue
            fields = [g * (f - (f @ d_out) * d_out) for f in (th, ph)]
            rth, rph = polarization_basis(d_out)
            matrix = np.array([[rth @ fields[0], rth @ fields[1]], [rph @ fields[0], rph @ fields[1]]])
            theta = math.acos(min(1.0, abs(float(d_in @ panel.normal))))
            event = InteractionEvent('ris', tuple(float(x) for x in c), name, surf, theta, s_in,
                                     aperture * abs(g) ** 2 / s_in ** 2)
            length = s_in + s_out
            rec = _make_record(ctx, matrix, [event], d_in, d_out, length, 1.0 / length,
                               (('ris', surf),), tx_vel, None if rx_vels is None else rx_vels[rx_i])
            if abs(rec.gain) > 0:
                out.setdefault(rx_i, []).append(rec)
    return out


def trace_paths(scene: Scene, bvh: Optional[Bvh], tx, rx_set, policy: Optional[TerminationPolicy],
                launch: Optional[np.ndarray] = None, capture_radius: float = DEFAULT_CAPTURE_RADIUS, *,
                tx_power: float = 1.0, polarization: Tuple[str, str] = ('V', 'V'),
                diffraction: bool = False, ris_panels: Sequence[RisPanel] = (),
                tx_velocity=None, rx_velocities=None, threads: int = 1,
                stats: Optional[TraceStats] = None) -> List[List[PathRecord]]:
    """
    Caminos exactos desde `tx` a cada receptor. `policy=None` limita el
    resultado a la línea de vista. Cada lista se ordena por firma de
    interacciones; los duplicados de la marcha se funden en un representante.
    Un receptor situado sobre el transmisor no tiene caminos.
    """
    if not capture_radius > 0:
        raise InvalidArgumentError("ray_engine: capture_radius debe ser > 0")
    for p in polarization:
        if p not in POLARIZATIONS:
            raise InvalidArgumentError(f"ray_engine: polarización desconocida '{p}'")
    tx = np.asarray(tx, dtype=float)
    rx_all = np.asarray(rx_set, dtype=float).reshape(-1, 3)
    at_source = np.linalg.norm(rx_all - tx, axis=1) < MIN_SEGMENT
    if at_source.any():
        log.warning("ray_engine: %d receptor(es) sobre el transmisor, sin caminos", int(at_source.sum()))
    kept = np.flatnonzero(~at_source)
    if rx_velocities is not None:
        rx_velocities = [rx_velocities[i] for i in kept]
    ctx = _make_context(scene, bvh, tx, rx_all[kept], policy, capture_radius, tx_power, polarization)
    stats = stats if stats is not None else TraceStats()

    candidates: Set[Tuple[int, Signature]] = {(i, ()) for i in range(len(ctx.rx))}
    if policy is not None and bvh is not None and launch is not None and len(launch) and len(ctx.rx):
        launch = nested_launch(launch)
        chunks = [launch[i:i + RAY_CHUNK] for i in range(0, len(launch), RAY_CHUNK)]
        if threads > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(lambda c: _march_chunk(ctx, c), chunks))
        else:
            results = [_march_chunk(ctx, c) for c in chunks]
        for found, chunk_stats in results:
            candidates |= found
            stats.merge(chunk_stats)
    stats.candidates += len(candidates)

    per_rx: Dict[int, List[PathRecord]] = {}
    ordered = sorted(candidates)
    groups = [_specular_paths(ctx, ordered, tx_velocity, rx_velocities)]
    if policy is not None and diffraction and bvh is not None:
        groups.append(_diffraction_paths(ctx, find_wedges(scene), tx_velocity, rx_velocities))
    if policy is not None and ris_panels:
        groups.append(_ris_paths(ctx, ris_panels, tx_velocity, rx_velocities))
    for g in groups:
        for rx_i, recs in g.items():
            per_rx.setdefault(int(kept[rx_i]), []).extend(recs)

    result = []
    for i in range(len(rx_all)):
        recs = sorted(per_rx.get(i, []), key=lambda r: r.signature)
        stats.paths += len(recs)
        result.append(recs)
    log.debug("trace_paths: %d candidatos, %d caminos", len(candidates), stats.paths)
    return result
