#!/usr/bin/env python3
"""
Módulo: scene_model.py
Ubicación: channel_twin/

Escena 3D anotada con materiales electromagnéticos:
- Material / SceneObject / Scene / Pose → tipos inmutables del modelo.
- parse_scene              → XML de escena → Scene (errores con línea/columna).
- serialize_scene          → Scene → XML canónico (ida y vuelta exacta).
- assign_materials_by_name → asigna materiales por prefijo más largo del nombre.
- transform_points         → p_global = R·p_local + t (isometría).
- load_material_table / load_default_rules → datos empaquetados en data/.

Unidades fijas: metros, Hz, segundos, radianes.
"""
import json
import logging
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import constants

from .errors import (
    AmbiguousRuleError,
    InvalidArgumentError,
    InvalidPoseError,
    SceneParseError,
    SceneSemanticError,
    UnmatchedNameError,
)

log = logging.getLogger(__name__)

SPEED_OF_LIGHT = constants.c
VACUUM_PERMITTIVITY = constants.epsilon_0

MIN_TRIANGLE_AREA = 1e-12
BOUNDS_TOLERANCE = 1e-9
POSE_TOLERANCE = 1e-9

DATA_DIR = Path(__file__).resolve().parent / 'data'

Vec3 = Tuple[float, float, float]
Triangle = Tuple[Vec3, Vec3, Vec3]


# ── Tipos ───────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Material:
    """Constantes electromagnéticas de un material (conductividad inf = PEC)."""
    name: str
    relative_permittivity: float = 1.0
    conductivity: float = 0.0
    relative_permeability: float = 1.0
    scattering_fraction: float = 0.0

    def __post_init__(self):
        if not self.name:
            raise SceneSemanticError("scene_model: material sin nombre")
        if not self.relative_permittivity >= 1.0:
            raise SceneSemanticError(
                f"scene_model: material '{self.name}': permitividad relativa < 1")
        if not self.conductivity >= 0.0:
            raise SceneSemanticError(
                f"scene_model: material '{self.name}': conductividad negativa")
        if not self.relative_permeability > 0.0:
            raise SceneSemanticError(
                f"scene_model: material '{self.name}': permeabilidad no positiva")
        if not 0.0 <= self.scattering_fraction <= 1.0:
            raise SceneSemanticError(
                f"scene_model: material '{self.name}': scattering_fraction fuera de [0,1]")

    @property
    def is_pec(self) -> bool:
        return math.isinf(self.conductivity)

    def refractive_index(self, frequency: float) -> complex:
        """
        n = sqrt(ε_r − jσ/(ωε₀)), rama principal: Im(n) ≤ 0 y la extinción
        κ = −Im(n) es no negativa (convención temporal e^{jωt}).
        Un conductor perfecto devuelve inf − j·inf.
        """
        if frequency <= 0:
            raise InvalidArgumentError("scene_model: frecuencia no positiva")
        if self.is_pec:
            return complex(math.inf, -math.inf)
        if self.conductivity == 0.0:
            return complex(math.sqrt(self.relative_permittivity), 0.0)
        omega = 2.0 * math.pi * frequency
        eps = complex(self.relative_permittivity,
                      -self.conductivity / (omega * VACUUM_PERMITTIVITY))
        return complex(np.sqrt(eps))


def _triangle_area(tri: Triangle) -> float:
    a, b, c = (np.asarray(v, dtype=float) for v in tri)
    return 0.5 * float(np.linalg.norm(np.cross(b - a, c - a)))


@dataclass(frozen=True)
class SceneObject:
    name: str
    triangles: Tuple[Triangle, ...]
    material: Material
    ris: bool = False

    def __post_init__(self):
        if not self.name:
            raise SceneSemanticError("scene_model: objeto sin nombre")
        if self.material is None:
            raise SceneSemanticError(f"scene_model: objeto '{self.name}' sin material")
        tris = tuple(
            tuple(tuple(float(c) for c in v) for v in tri) for tri in self.triangles
        )
        object.__setattr__(self, 'triangles', tris)
        for i, tri in enumerate(tris):
            if len(tri) != 3 or any(len(v) != 3 for v in tri):
                raise SceneSemanticError(
                    f"scene_model: objeto '{self.name}': triángulo {i} mal formado")
            if _triangle_area(tri) <= MIN_TRIANGLE_AREA:
                raise SceneSemanticError(
                    f"scene_model: objeto '{self.name}': triángulo {i} degenerado")


@dataclass(frozen=True)
class Scene:
    """
    Escena inmutable. `bounds` es opcional: si falta se usa la caja de los
    triángulos; una escena vacía sin límites explícitos no está acotada.
    """
    objects: Tuple[SceneObject, ...]
    frequency: float
    bounds: Optional[Tuple[Vec3, Vec3]] = None

    def __post_init__(self):
        object.__setattr__(self, 'objects', tuple(self.objects))
        if not self.frequency > 0:
            raise SceneSemanticError("scene_model: frecuencia debe ser > 0")
        if self.bounds is not None:
            lo, hi = (tuple(float(c) for c in b) for b in self.bounds)
            object.__setattr__(self, 'bounds', (lo, hi))
            if any(l > h for l, h in zip(lo, hi)):
                raise SceneSemanticError("scene_model: límites invertidos")
            for obj in self.objects:
                for tri in obj.triangles:
                    for v in tri:
                        if not self._inside(v, lo, hi):
                            raise SceneSemanticError(
                                f"scene_model: objeto '{obj.name}' fuera de los límites")

    @staticmethod
    def _inside(p, lo, hi) -> bool:
        return all(l - BOUNDS_TOLERANCE <= c <= h + BOUNDS_TOLERANCE
                   for c, l, h in zip(p, lo, hi))

    # ── derivados ───────────────────────────────────────────────────────────

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.frequency

    @property
    def triangle_count(self) -> int:
        return sum(len(o.triangles) for o in self.objects)

    @property
    def effective_bounds(self) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        if self.bounds is not None:
            return np.asarray(self.bounds[0]), np.asarray(self.bounds[1])
        if self.triangle_count == 0:
            return None
        v = self.vertices.reshape(-1, 3)
        return v.min(axis=0), v.max(axis=0)

    def contains(self, point) -> bool:
        eb = self.effective_bounds
        if eb is None:
            return True
        return self._inside(point, eb[0], eb[1])

    @cached_property
    def vertices(self) -> np.ndarray:
        """(T, 3, 3) vértices de todos los triángulos en orden de objeto."""
        tris = [tri for o in self.objects for tri in o.triangles]
        if not tris:
            return np.zeros((0, 3, 3))
        return np.asarray(tris, dtype=float)

    @cached_property
    def tri_object(self) -> np.ndarray:
        return np.asarray(
            [i for i, o in enumerate(self.objects) for _ in o.triangles], dtype=np.int64)

    @cached_property
    def tri_normals(self) -> np.ndarray:
        v = self.vertices
        if len(v) == 0:
            return np.zeros((0, 3))
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    @cached_property
    def surface_id(self) -> np.ndarray:
        """
        Triángulos coplanares de un mismo objeto comparten superficie; los ids
        siguen el orden de primera aparición.
        """
        ids = np.zeros(len(self.vertices), dtype=np.int64)
        seen: Dict[tuple, int] = {}
        for t, (obj, n, v0) in enumerate(zip(self.tri_object, self.tri_normals, self.vertices[:, 0])):
            k = n.copy()
            nz = np.flatnonzero(np.abs(k) > 1e-9)
            if k[nz[0]] < 0:
                k = -k
            key = (int(obj), *np.round(k, 6), round(float(k @ v0), 6))
            ids[t] = seen.setdefault(key, len(seen))
        return ids

    @cached_property
    def surface_object(self) -> np.ndarray:
        out = np.zeros(int(self.surface_id.max()) + 1 if len(self.surface_id) else 0, dtype=np.int64)
        out[self.surface_id] = self.tri_object
        return out

    def materials(self) -> Dict[str, Material]:
        return {o.material.name: o.material for o in self.objects}

    def with_objects(self, extra: Iterable[SceneObject]) -> 'Scene':
        return replace(self, objects=self.objects + tuple(extra))


@dataclass(eq=False)
class Pose:
    """Pose rígida: rotación 3×3 ortonormal (det = +1) y traslación en metros."""
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.translation = np.asarray(self.translation, dtype=float)
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise InvalidPoseError("scene_model: pose con dimensiones inválidas")
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), atol=POSE_TOLERANCE, rtol=0):
            raise InvalidPoseError("scene_model: rotación no ortonormal")
        if abs(np.linalg.det(self.rotation) - 1.0) > POSE_TOLERANCE:
            raise InvalidPoseError("scene_model: det(R) != +1")

    @classmethod
    def from_heading_tilt(cls, heading: float, tilt: float, translation=(0.0, 0.0, 0.0)) -> 'Pose':
        """Rotación Rz(heading)·Ry(−tilt): tilt positivo inclina el eje x hacia arriba."""
        ch, sh = math.cos(heading), math.sin(heading)
        ct, st = math.cos(-tilt), math.sin(-tilt)
        rz = np.array([[ch, -sh, 0.0], [sh, ch, 0.0], [0.0, 0.0, 1.0]])
        ry = np.array([[ct, 0.0, st], [0.0, 1.0, 0.0], [-st, 0.0, ct]])
        return cls(rz @ ry, np.asarray(translation, dtype=float))


def transform_points(points, pose: Pose) -> np.ndarray:
    """Lleva puntos del marco local al global: pᵍ = R·pˡ + t."""
    if not isinstance(pose, Pose):
        raise InvalidPoseError("scene_model: se esperaba Pose")
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    return pts @ pose.rotation.T + pose.translation


# ── Tablas empaquetadas ─────────────────────────────────────────────────────

def _material_from_entry(name: str, entry: Mapping) -> Material:
    return Material(
        name=name,
        relative_permittivity=float(entry.get('permittivity', 1.0)),
        conductivity=float(entry.get('conductivity', 0.0)),
        relative_permeability=float(entry.get('permeability', 1.0)),
        scattering_fraction=float(entry.get('scattering', 0.0)),
    )


def load_material_table(path: Optional[Path] = None) -> Dict[str, Material]:
    """Carga la tabla de materiales (por defecto data/materials.json)."""
    path = Path(path) if path else DATA_DIR / 'materials.json'
    raw = json.loads(path.read_text(encoding='utf-8'))
    return {name: _material_from_entry(name, entry) for name, entry in raw.items()}


def load_default_rules(table: Optional[Mapping[str, Material]] = None) -> Dict[str, Material]:
    """Reglas nombre→material por defecto resueltas contra la tabla."""
    table = table if table is not None else load_material_table()
    raw = json.loads((DATA_DIR / 'default_rules.json').read_text(encoding='utf-8'))
    return {key: table[mat] for key, mat in raw.items()}


# ── XML ─────────────────────────────────────────────────────────────────────

def _vec(text: Optional[str], what: str) -> Vec3:
    parts = (text or '').split()
    if len(parts) != 3:
        raise SceneSemanticError(f"scene_model: {what}: se esperaban 3 coordenadas")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise SceneSemanticError(f"scene_model: {what}: coordenada no numérica") from None


def _float_attr(el: ET.Element, attr: str, default: Optional[float] = None) -> float:
    raw = el.get(attr)
    if raw is None:
        if default is None:
            raise SceneSemanticError(f"scene_model: <{el.tag}> sin atributo '{attr}'")
        return default
    try:
        return float(raw)
    except ValueError:
        raise SceneSemanticError(
            f"scene_model: <{el.tag}> atributo '{attr}' no numérico: {raw!r}") from None


def parse_scene(document: str, fallback_materials: Optional[Mapping[str, Material]] = None) -> Scene:
    """
    Interpreta el XML de escena.

    Los materiales se resuelven primero contra los <material> del documento y
    luego contra `fallback_materials` (la tabla empaquetada si es None).
    """
    try:
        root = ET.fromstring(document)
    except ET.ParseError as e:
        line, col = getattr(e, 'position', (None, None))
        raise SceneParseError(f"XML mal formado: {e}", line, col) from None

    if root.tag != 'scene':
        raise SceneSemanticError(f"scene_model: raíz <{root.tag}> inesperada, se esperaba <scene>")
    frequency = _float_attr(root, 'frequency_hz')
    bounds = None
    if root.get('bounds') is not None:
        parts = root.get('bounds').split()
        if len(parts) != 6:
            raise SceneSemanticError("scene_model: 'bounds' necesita 6 valores")
        try:
            vals = tuple(float(p) for p in parts)
        except ValueError:
            raise SceneSemanticError(
                f"scene_model: <scene> atributo 'bounds' no numérico: {root.get('bounds')!r}") from None
        bounds = (vals[:3], vals[3:])

    declared: Dict[str, Material] = {}
    objects: List[SceneObject] = []
    fallback = fallback_materials if fallback_materials is not None else load_material_table()

    for child in root:
        if child.tag == 'material':
            name = child.get('name') or ''
            declared[name] = Material(
                name=name,
                relative_permittivity=_float_attr(child, 'permittivity', 1.0),
                conductivity=_float_attr(child, 'conductivity', 0.0),
                relative_permeability=_float_attr(child, 'permeability', 1.0),
                scattering_fraction=_float_attr(child, 'scattering', 0.0),
            )

    for child in root:
        if child.tag == 'material':
            continue
        if child.tag != 'object':
            raise SceneSemanticError(f"scene_model: elemento desconocido <{child.tag}>")
        name = child.get('name') or ''
        mat_name = child.get('material') or ''
        material = declared.get(mat_name) or fallback.get(mat_name)
        if material is None:
            raise SceneSemanticError(
                f"scene_model: objeto '{name}' referencia material indefinido '{mat_name}'")
        triangles: List[Triangle] = []
        for el in child:
            if el.tag == 'tri':
                triangles.append(tuple(_vec(el.get(k), f"objeto '{name}' <tri {k}>")
                                       for k in ('v0', 'v1', 'v2')))
            elif el.tag == 'quad':
                q = [_vec(el.get(k), f"objeto '{name}' <quad {k}>")
                     for k in ('v0', 'v1', 'v2', 'v3')]
                triangles.append((q[0], q[1], q[2]))
                triangles.append((q[0], q[2], q[3]))
            else:
                raise SceneSemanticError(
                    f"scene_model: objeto '{name}': elemento desconocido <{el.tag}>")
        objects.append(SceneObject(name=name, triangles=tuple(triangles), material=material,
                                   ris=child.get('ris', 'false').lower() == 'true'))

    scene = Scene(objects=tuple(objects), frequency=frequency, bounds=bounds)
    log.debug("Escena cargada: %d objetos, %d triángulos", len(scene.objects), scene.triangle_count)
    return scene


def _fmt(x: float) -> str:
    return repr(float(x))


def serialize_scene(scene: Scene) -> str:
    """Forma canónica: materiales ordenados por nombre, objetos en orden, floats repr."""
    root = ET.Element('scene', {'frequency_hz': _fmt(scene.frequency)})
    if scene.bounds is not None:
        root.set('bounds', ' '.join(_fmt(c) for c in (*scene.bounds[0], *scene.bounds[1])))
    for name, mat in sorted(scene.materials().items()):
        attrs = {
            'name': name,
            'permittivity': _fmt(mat.relative_permittivity),
            'conductivity': _fmt(mat.conductivity),
            'permeability': _fmt(mat.relative_permeability),
        }
        if mat.scattering_fraction:
            attrs['scattering'] = _fmt(mat.scattering_fraction)
        ET.SubElement(root, 'material', attrs)
    for obj in scene.objects:
        attrs = {'name': obj.name, 'material': obj.material.name}
        if obj.ris:
            attrs['ris'] = 'true'
        el = ET.SubElement(root, 'object', attrs)
        for tri in obj.triangles:
            ET.SubElement(el, 'tri', {
                f'v{i}': ' '.join(_fmt(c) for c in v) for i, v in enumerate(tri)
            })
    ET.indent(root)
    return ET.tostring(root, encoding='unicode') + '\n'


def load_scene(path: Path) -> Scene:
    return parse_scene(Path(path).read_text(encoding='utf-8'))


# ── Asignación de materiales ────────────────────────────────────────────────

def _match_rule(name: str, keys: Sequence[str]) -> Optional[str]:
    lowered = name.lower()
    hits = [k for k in keys if lowered.startswith(k.lower())]
    if not hits:
        return None
    longest = max(len(k) for k in hits)
    best = [k for k in hits if len(k) == longest]
    if len(best) > 1:
        raise AmbiguousRuleError(name, best)
    return best[0]


def assign_materials_by_name(scene: Scene, rules: Mapping[str, Material]) -> Scene:
    """
    Asigna a cada objeto el material de la regla cuyo prefijo (sin distinguir
    mayúsculas) es el más largo. Determinista e idempotente.
    """
    keys = sorted(rules)
    unmatched: List[str] = []
    updated: List[SceneObject] = []
    for obj in scene.objects:
        key = _match_rule(obj.name, keys)
        if key is None:
            unmatched.append(obj.name)
            continue
        updated.append(replace(obj, material=rules[key]))
    if unmatched:
        raise UnmatchedNameError(unmatched)
    return replace(scene, objects=tuple(updated))
