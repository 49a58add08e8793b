#!/usr/bin/env python3
"""
Módulo: config.py
Ubicación: channel_twin/

Documento JSON de simulación → SimulationConfig validado.

- load_config      → carga, convierte unidades (grados → rad, dBm → W) y valida.
- validate_config  → informe {"ok": bool, "issues": [{"check", "message"}]}.
- design_ris       → perfil de fase de un panel según sus haces configurados.

Los ángulos solo aparecen en grados dentro del JSON; a partir de aquí todo va
en radianes. Todos los problemas se recogen antes de fallar, para que el
informe de `validate` sea completo.
"""
import json
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .coverage import GridSpec
from .devices import (
    AntennaArray,
    RisPanel,
    Terminal,
    dbm_to_watts,
    frame_from_normal,
    ris_multibeam_optimize,
    ris_panel_object,
    ris_single_beam_profile,
)
from .errors import ChannelTwinError, ConfigError
from .ray_engine import (
    DEFAULT_CAPTURE_RADIUS,
    POLARIZATIONS,
    TerminationPolicy,
    biased_directions,
    fibonacci_directions,
)
from .scene_model import Scene, assign_materials_by_name, load_default_rules, load_material_table, load_scene

log = logging.getLogger(__name__)

DEFAULT_LAUNCH_COUNT = 10000
DEFAULT_BANDWIDTH = 100e6
DEFAULT_CFR_POINTS = 64
DEFAULT_RIS_ITERATIONS = 200


@dataclass
class RisConfig:
    panel: RisPanel
    beams: List[Tuple[float, float, float]]  # (θ, φ, peso) en el marco local del panel
    iterations: int = DEFAULT_RIS_ITERATIONS


@dataclass
class GridConfig:
    spec: GridSpec
    tx_id: str


@dataclass
class SimulationConfig:
    source: Path
    scene: Scene
    transmitters: List[Terminal]
    receivers: List[Terminal]
    ris: List[RisConfig] = field(default_factory=list)
    policy: Optional[TerminationPolicy] = None
    launch_count: int = DEFAULT_LAUNCH_COUNT
    bias: Optional[Tuple[Tuple[float, float], float]] = None
    capture_radius: float = DEFAULT_CAPTURE_RADIUS
    diffraction: bool = False
    bandwidth: float = DEFAULT_BANDWIDTH
    cfr_points: int = DEFAULT_CFR_POINTS
    polarization: Tuple[str, str] = ('V', 'V')
    grids: Dict[str, GridConfig] = field(default_factory=dict)
    snapshots: List[float] = field(default_factory=list)
    seed: int = 0
    document: dict = field(default_factory=dict)

    def launch_directions(self) -> np.ndarray:
        if self.bias is None:
            return fibonacci_directions(self.launch_count)
        band, fraction = self.bias
        return biased_directions(self.launch_count, band, fraction)

    def terminal(self, terminal_id: str) -> Terminal:
        for t in self.transmitters + self.receivers:
            if t.id == terminal_id:
                return t
        raise KeyError(terminal_id)


# ── Recogida de problemas ───────────────────────────────────────────────────

class _Issues:
    def __init__(self):
        self.items: List[Tuple[str, str]] = []

    @contextmanager
    def check(self, name: str):
        try:
            yield
        except ChannelTwinError as e:
            self.items.append((name, str(e)))
        except (KeyError, TypeError, ValueError) as e:
            detail = f"falta la clave {e}" if isinstance(e, KeyError) else str(e)
            self.items.append((name, f"config: {detail}"))

    def add(self, name: str, message: str) -> None:
        self.items.append((name, message))


def _vec3(value, what: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise ValueError(f"{what}: se esperaba un vector de 3 números finitos")
    return arr


def _array(entry: Optional[dict], wavelength: float) -> AntennaArray:
    entry = entry or {}
    return AntennaArray(
        rows=int(entry.get('rows', 1)),
        cols=int(entry.get('cols', 1)),
        spacing_v=float(entry.get('spacing_v_wl', 0.5)) * wavelength,
        spacing_h=float(entry.get('spacing_h_wl', 0.5)) * wavelength,
    )


def _terminal(entry: dict, wavelength: float) -> Terminal:
    tid = str(entry['id'])
    return Terminal(
        id=tid,
        position=_vec3(entry['position'], f"terminal '{tid}' position"),
        heading=math.radians(float(entry.get('heading_deg', 0.0))),
        tilt=math.radians(float(entry.get('tilt_deg', 0.0))),
        tx_power_dbm=float(entry.get('power_dbm', 0.0)),
        array=_array(entry.get('array'), wavelength),
        velocity=_vec3(entry.get('velocity', (0.0, 0.0, 0.0)), f"terminal '{tid}' velocity"),
    )


def _ris(entry: dict, wavelength: float) -> RisConfig:
    rid = str(entry['id'])
    panel = RisPanel(
        id=rid,
        rows=int(entry['rows']),
        cols=int(entry['cols']),
        pitch=float(entry.get('pitch_wl', 0.5)) * wavelength,
        center=_vec3(entry['center'], f"RIS '{rid}' center"),
        rotation=frame_from_normal(_vec3(entry['normal'], f"RIS '{rid}' normal")),
    )
    beams = [(math.radians(float(b['theta_deg'])), math.radians(float(b['phi_deg'])),
              float(b.get('weight', 1.0))) for b in entry.get('beams', ())]
    return RisConfig(panel, beams, int(entry.get('iterations', DEFAULT_RIS_ITERATIONS)))


def _grid(entry: dict, default_tx: Optional[str]) -> GridConfig:
    spec = GridSpec(
        grid_id=str(entry['id']),
        center=tuple(_vec3(entry['center'], 'grid center')),
        size=tuple(float(s) for s in entry['size']),
        resolution=float(entry['resolution']),
        normal=tuple(_vec3(entry.get('normal', (0.0, 0.0, 1.0)), 'grid normal')),
        rotation=math.radians(float(entry.get('rotation_deg', 0.0))),
    )
    tx_id = entry.get('tx', default_tx)
    if tx_id is None:
        raise ValueError(f"rejilla '{spec.grid_id}' sin transmisor")
    return GridConfig(spec, str(tx_id))


def _apply_rules(scene: Scene, rules) -> Scene:
    if rules in (None, False):
        return scene
    if rules in (True, 'default'):
        return assign_materials_by_name(scene, load_default_rules())
    table = load_material_table()
    table.update(scene.materials())
    return assign_materials_by_name(scene, {k: table[v] for k, v in dict(rules).items()})


# ── Carga ───────────────────────────────────────────────────────────────────

def _build(path: Path, seed: Optional[int]) -> Tuple[Optional[SimulationConfig], List[Tuple[str, str]]]:
    issues = _Issues()
    try:
        doc = json.loads(Path(path).read_text(encoding='utf-8'))
    except OSError as e:
        return None, [('config', f"config: no se puede leer '{path}': {e}")]
    except json.JSONDecodeError as e:
        return None, [('config', f"config: JSON inválido (línea {e.lineno}, columna {e.colno}): {e.msg}")]
    if not isinstance(doc, dict):
        return None, [('config', "config: la raíz debe ser un objeto JSON")]

    scene = None
    with issues.check('scene'):
        scene_path = (Path(path).parent / doc['scene']).resolve()
        if not scene_path.is_file():
            raise ValueError(f"escena no encontrada: {scene_path}")
        scene = load_scene(scene_path)
        if 'frequency_hz' in doc:
            scene = replace(scene, frequency=float(doc['frequency_hz']))
    if scene is not None:
        with issues.check('assign_materials_by_name'):
            scene = _apply_rules(scene, doc.get('material_rules'))
    lam = scene.wavelength if scene is not None else 1.0

    transmitters: List[Terminal] = []
    receivers: List[Terminal] = []
    for key, bucket in (('transmitters', transmitters), ('receivers', receivers)):
        for i, entry in enumerate(doc.get(key, ())):
            with issues.check(f"{key}[{i}]"):
                term = _terminal(entry, lam)
                if scene is not None and not scene.contains(term.position):
                    raise ValueError(f"terminal '{term.id}' fuera de los límites de la escena")
                bucket.append(term)
    if not doc.get('transmitters'):
        issues.add('transmitters', "config: se necesita al menos un transmisor")
    ids = [t.id for t in transmitters + receivers]
    dup = sorted({i for i in ids if ids.count(i) > 1})
    if dup:
        issues.add('terminals', "config: identificadores repetidos: " + ", ".join(dup))

    ris: List[RisConfig] = []
    for i, entry in enumerate(doc.get('ris', ())):
        with issues.check(f"ris[{i}]"):
            ris.append(_ris(entry, lam))

    policy = None
    if doc.get('termination') is not None:
        with issues.check('TerminationPolicy'):
            term = doc['termination']
            policy = TerminationPolicy(int(term['max_interactions']),
                                       dbm_to_watts(float(term.get('min_power_dbm', -200.0))))

    launch = doc.get('launch', {})
    launch_count, bias, capture = DEFAULT_LAUNCH_COUNT, None, DEFAULT_CAPTURE_RADIUS
    with issues.check('launch'):
        launch_count = int(launch.get('count', DEFAULT_LAUNCH_COUNT))
        if launch_count < 1:
            raise ValueError("launch.count debe ser ≥ 1")
        capture = float(launch.get('capture_radius_m', DEFAULT_CAPTURE_RADIUS))
        if not capture > 0:
            raise ValueError("launch.capture_radius_m debe ser > 0")
        if launch.get('bias'):
            lo, hi = (math.radians(float(a)) for a in launch['bias']['elevation_deg'])
            bias = ((lo, hi), float(launch['bias']['fraction']))
            biased_directions(launch_count, *bias)

    bandwidth, cfr_points = DEFAULT_BANDWIDTH, DEFAULT_CFR_POINTS
    with issues.check('channel'):
        bandwidth = float(doc.get('bandwidth_hz', DEFAULT_BANDWIDTH))
        cfr_points = int(doc.get('cfr_points', DEFAULT_CFR_POINTS))
        if not bandwidth > 0 or cfr_points < 1:
            raise ValueError("bandwidth_hz debe ser > 0 y cfr_points ≥ 1")

    polarization = tuple(doc.get('polarization', ('V', 'V')))
    if len(polarization) != 2 or any(p not in POLARIZATIONS for p in polarization):
        issues.add('polarization', f"config: polarización inválida {list(polarization)}, use 'V'/'H'")

    grids: Dict[str, GridConfig] = {}
    default_tx = transmitters[0].id if transmitters else None
    for i, entry in enumerate(doc.get('grids', ())):
        with issues.check(f"grids[{i}]"):
            g = _grid(entry, default_tx)
            if g.spec.grid_id in grids:
                raise ValueError(f"rejilla repetida '{g.spec.grid_id}'")
            if g.tx_id not in {t.id for t in transmitters}:
                raise ValueError(f"rejilla '{g.spec.grid_id}': transmisor desconocido '{g.tx_id}'")
            grids[g.spec.grid_id] = g

    snapshots: List[float] = []
    with issues.check('snapshots'):
        snapshots = [float(t) for t in doc.get('snapshots', ())]
        if any(b <= a for a, b in zip(snapshots, snapshots[1:])):
            raise ValueError("los instantes deben ser estrictamente crecientes")

    effective_seed = int(doc.get('seed', 0)) if seed is None else int(seed)

    if issues.items or scene is None:
        return None, issues.items
    document = dict(doc)
    document['seed'] = effective_seed
    return SimulationConfig(
        source=Path(path), scene=scene, transmitters=transmitters, receivers=receivers, ris=ris,
        policy=policy, launch_count=launch_count, bias=bias, capture_radius=capture,
        diffraction=bool(doc.get('diffraction', False)), bandwidth=bandwidth, cfr_points=cfr_points,
        polarization=polarization, grids=grids, snapshots=snapshots, seed=effective_seed,
        document=document,
    ), []


def load_config(path: Path, seed: Optional[int] = None) -> SimulationConfig:
    cfg, issues = _build(Path(path), seed)
    if issues:
        for check, message in issues:
            log.warning("%s → %s", check, message)
        raise ConfigError(issues)
    log.info("Configuración cargada: %d TX, %d RX, %d rejillas",
             len(cfg.transmitters), len(cfg.receivers), len(cfg.grids))
    return cfg


def validate_config(path: Path) -> dict:
    _, issues = _build(Path(path), None)
    return {'ok': not issues, 'issues': [{'check': c, 'message': m} for c, m in issues]}


# ── RIS ─────────────────────────────────────────────────────────────────────

def design_ris(ris: RisConfig, wavelength: float, seed: int) -> RisPanel:
    """Sin haces: fase nula; un haz: gradiente lineal; varios: optimizador multi-haz."""
    panel = ris.panel
    if not ris.beams:
        return panel
    if len(ris.beams) == 1:
        theta, phi, _ = ris.beams[0]
        return panel.with_profile(ris_single_beam_profile(panel, theta, phi, wavelength))
    result = ris_multibeam_optimize(
        panel, [(t, p) for t, p, _ in ris.beams], [w for _, _, w in ris.beams], wavelength,
        iterations=ris.iterations, seed=seed,
    )
    return panel.with_profile(result.phase_profile)


def prepare_scene(cfg: SimulationConfig) -> Tuple[Scene, List[RisPanel]]:
    """Paneles RIS diseñados y la escena con su geometría añadida."""
    panels = [design_ris(r, cfg.scene.wavelength, cfg.seed) for r in cfg.ris]
    scene = cfg.scene.with_objects([ris_panel_object(p) for p in panels]) if panels else cfg.scene
    return scene, panels
