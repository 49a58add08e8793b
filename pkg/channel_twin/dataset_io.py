#!/usr/bin/env python3
"""
Módulo: dataset_io.py
Ubicación: channel_twin/

Paquete de escenario autocontenido en disco:

    <root>/
      scene.xml            escena canónica con materiales
      config.json          {"simulation": ..., "grids": {...}}
      paths/<link>.csv     un camino por fila
      coverage/<grid>.csv  volcado numérico del mapa
      coverage/<grid>.ppm  imagen P6
      channels/<link>.dtch tensor CFR (little-endian, complex64)
      channels/<link>.json metadatos del enlace, taps CIR, PDP y caminos completos
      manifest.csv         path, role, link_or_grid_id, sha256 (no se lista a sí mismo)

- write_package → escribe en un directorio temporal hermano y lo mueve al final.
- read_package  → valida digests y completitud y reconstruye ScenarioResults.
"""
import csv
import io
import json
import logging
import shutil
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .channel_synthesis import ChannelResponse, InteractionEvent, PathRecord, power_delay_profile
from .cli_utils import hash_file_streaming, is_ignored, load_noise_spec
from .coverage import CoverageGrid, GridSpec, rasterize, read_coverage_csv, write_coverage_csv
from .errors import (
    IncompletePackageError,
    PackageCorruptionError,
    PackageExistsError,
)
from .scene_model import Scene, parse_scene, serialize_scene

log = logging.getLogger(__name__)

TENSOR_MAGIC = b'DTCH'
TENSOR_VERSION = 1
LAYOUT_CIR = 0
LAYOUT_CFR = 1
_HEADER = struct.Struct('<4sIIIII')

MANIFEST = 'manifest.csv'
MANIFEST_HEADER = ['path', 'role', 'link_or_grid_id', 'sha256']
PATH_CSV_HEADER = ['rx_id', 'path_id', 'gain_abs', 'phase_rad', 'delay_s', 'aod_az', 'aod_el',
                   'aoa_az', 'aoa_el', 'doppler_hz', 'interaction_count', 'interactions']
OUTPUT_DIRS = ('paths', 'coverage', 'channels')


@dataclass
class LinkResult:
    link_id: str
    tx_id: str
    rx_id: str
    paths: List[PathRecord]
    channel: ChannelResponse


@dataclass
class ScenarioResults:
    scene: Scene
    config: dict
    links: List[LinkResult] = field(default_factory=list)
    grids: List[CoverageGrid] = field(default_factory=list)
    palette: str = 'viridis'
    db_range: Optional[Tuple[float, float]] = None


@dataclass
class ScenarioPackage:
    root: Path
    manifest: List[Dict[str, str]]

    def files(self) -> List[str]:
        return [row['path'] for row in self.manifest]


# ── Codificación ────────────────────────────────────────────────────────────

def encode_tensor(tensor: np.ndarray, layout: int = LAYOUT_CFR) -> bytes:
    data = np.ascontiguousarray(tensor, dtype='<c8')
    n_r, n_t, depth = data.shape
    return _HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, n_r, n_t, depth, layout) + data.tobytes()


def decode_tensor(blob: bytes) -> Tuple[np.ndarray, int]:
    if len(blob) < _HEADER.size:
        raise PackageCorruptionError('tensor', 'cabecera truncada')
    magic, version, n_r, n_t, depth, layout = _HEADER.unpack_from(blob)
    if magic != TENSOR_MAGIC or version != TENSOR_VERSION:
        raise PackageCorruptionError('tensor', 'cabecera DTCH inválida')
    body = np.frombuffer(blob, dtype='<c8', offset=_HEADER.size)
    if body.size != n_r * n_t * depth:
        raise PackageCorruptionError('tensor', 'tamaño de datos inconsistente')
    return body.reshape(n_r, n_t, depth).astype(complex), layout


def _complex_pair(z: complex) -> List[float]:
    return [float(z.real), float(z.imag)]


def _matrix_to_json(m: np.ndarray) -> List:
    return [[_complex_pair(z) for z in row] for row in np.asarray(m)]


def _matrix_from_json(rows) -> np.ndarray:
    return np.array([[complex(re, im) for re, im in row] for row in rows], dtype=complex)


def _path_to_json(p: PathRecord) -> dict:
    return {
        'gain': _complex_pair(p.gain),
        'delay': p.delay,
        'length': p.length,
        'aod': list(p.aod),
        'aoa': list(p.aoa),
        'doppler': p.doppler,
        'signature': [list(s) for s in p.signature],
        'polarization': _matrix_to_json(p.polarization),
        'interactions': [{
            'kind': e.kind, 'point': list(e.point), 'object': e.object, 'surface': e.surface,
            'incident_angle': e.incident_angle, 'segment_length': e.segment_length, 'power': e.power,
        } for e in p.interactions],
    }


def _path_from_json(d: dict) -> PathRecord:
    return PathRecord(
        gain=complex(*d['gain']), delay=d['delay'], aod=tuple(d['aod']), aoa=tuple(d['aoa']),
        doppler=d['doppler'],
        interactions=tuple(InteractionEvent(e['kind'], tuple(e['point']), e['object'], e['surface'],
                                            e['incident_angle'], e['segment_length'], e['power'])
                           for e in d['interactions']),
        length=d['length'], polarization=_matrix_from_json(d['polarization']),
        signature=tuple((k, int(s)) for k, s in d['signature']),
    )


def _sidecar(link: LinkResult) -> str:
    ch = link.channel
    doc = {
        'link_id': link.link_id,
        'tx_id': link.tx_id,
        'rx_id': link.rx_id,
        'time_s': ch.time,
        'sample_rate_hz': ch.sample_rate,
        'freq_grid_hz': [float(f) for f in ch.freq_grid],
        'cir_taps': [{'tap': int(n), 'matrix': _matrix_to_json(m)} for n, m in ch.cir_taps],
        'pdp': [[int(n), p] for n, p in power_delay_profile(ch.cir_taps)],
        'paths': [_path_to_json(p) for p in link.paths],
    }
    return json.dumps(doc, sort_keys=True, indent=2) + '\n'


def paths_csv(link: LinkResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator='\n')
    w.writerow(PATH_CSV_HEADER)
    for i, p in enumerate(link.paths):
        inter = ';'.join(f"{e.kind}:{e.point[0]!r}:{e.point[1]!r}:{e.point[2]!r}" for e in p.interactions)
        w.writerow([link.rx_id, i, repr(abs(p.gain)), repr(float(np.angle(p.gain))), repr(p.delay),
                    repr(float(p.aod[0])), repr(float(p.aod[1])), repr(float(p.aoa[0])),
                    repr(float(p.aoa[1])), repr(float(p.doppler)), p.interaction_count, inter])
    return buf.getvalue()


# ── Escritura ───────────────────────────────────────────────────────────────

def _write(stage: Path, rel: str, content, role: str, ident: str, rows: List[Dict[str, str]]) -> None:
    target = stage / rel
    target.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(content, bytes):
        target.write_bytes(content)
    else:
        with open(target, 'w', encoding='utf-8', newline='') as f:
            f.write(content)
    rows.append({'path': rel, 'role': role, 'link_or_grid_id': ident, 'sha256': hash_file_streaming(target)})


def write_package(results: ScenarioResults, root: Path) -> ScenarioPackage:
    """Escribe el paquete; si algo falla no queda ninguna salida parcial."""
    root = Path(root)
    if root.exists() and (not root.is_dir() or any(root.iterdir())):
        raise PackageExistsError(f"dataset_io: el destino '{root}' no está vacío")
    root.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix='.channel-twin-', dir=root.parent))
    try:
        rows: List[Dict[str, str]] = []
        for d in OUTPUT_DIRS:
            (stage / d).mkdir()
        _write(stage, 'scene.xml', serialize_scene(results.scene), 'scene', '', rows)
        config_doc = {
            'simulation': results.config,
            'grids': {g.spec.grid_id: g.spec.to_dict() for g in results.grids},
        }
        _write(stage, 'config.json', json.dumps(config_doc, sort_keys=True, indent=2) + '\n',
               'config', '', rows)
        for link in results.links:
            _write(stage, f"paths/{link.link_id}.csv", paths_csv(link), 'paths', link.link_id, rows)
            _write(stage, f"channels/{link.link_id}.dtch", encode_tensor(link.channel.cfr),
                   'channel_tensor', link.link_id, rows)
            _write(stage, f"channels/{link.link_id}.json", _sidecar(link), 'channel_meta', link.link_id, rows)
        for grid in results.grids:
            gid = grid.spec.grid_id
            _write(stage, f"coverage/{gid}.csv", write_coverage_csv(grid), 'coverage_grid', gid, rows)
            _write(stage, f"coverage/{gid}.ppm", rasterize(grid, results.palette, results.db_range),
                   'coverage_image', gid, rows)
        rows.sort(key=lambda r: r['path'])
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=MANIFEST_HEADER, lineterminator='\n')
        w.writeheader()
        w.writerows(rows)
        (stage / MANIFEST).write_text(buf.getvalue(), encoding='utf-8')

        root.mkdir(exist_ok=True)
        for entry in sorted(stage.iterdir()):
            shutil.move(str(entry), str(root / entry.name))
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        if root.exists():
            for entry in root.iterdir():
                if entry.is_dir():
                    shutil.rmtree(entry, ignore_errors=True)
                else:
                    entry.unlink()
        raise
    shutil.rmtree(stage, ignore_errors=True)
    log.info("Paquete escrito en %s (%d archivos)", root, len(rows))
    return ScenarioPackage(root, rows)


# ── Lectura ─────────────────────────────────────────────────────────────────

def read_manifest(root: Path) -> List[Dict[str, str]]:
    path = Path(root) / MANIFEST
    if not path.is_file():
        raise IncompletePackageError(f"dataset_io: falta {MANIFEST} en '{root}'")
    with open(path, encoding='utf-8', newline='') as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != MANIFEST_HEADER:
            raise PackageCorruptionError(MANIFEST, 'cabecera inesperada')
        return list(reader)


def verify_package(root: Path) -> List[Dict[str, str]]:
    """Comprueba digests y que disco y manifiesto listen los mismos archivos."""
    root = Path(root)
    rows = read_manifest(root)
    noise = load_noise_spec()
    listed = set()
    for row in rows:
        rel = row['path']
        listed.add(rel)
        target = root / rel
        if not target.is_file():
            raise IncompletePackageError(f"dataset_io: falta el archivo '{rel}'")
        if hash_file_streaming(target) != row['sha256']:
            raise PackageCorruptionError(rel)
    on_disk = {p.relative_to(root).as_posix() for p in root.rglob('*') if p.is_file()}
    on_disk.discard(MANIFEST)
    extra = sorted(p for p in on_disk - listed if not is_ignored(p, noise))
    if extra:
        raise IncompletePackageError(f"dataset_io: archivos no listados en el manifiesto: {', '.join(extra)}")
    return rows


def read_package(root: Path) -> ScenarioResults:
    root = Path(root)
    rows = verify_package(root)
    scene = parse_scene((root / 'scene.xml').read_text(encoding='utf-8'))
    config_doc = json.loads((root / 'config.json').read_text(encoding='utf-8'))

    links: List[LinkResult] = []
    for row in rows:
        if row['role'] != 'channel_meta':
            continue
        meta = json.loads((root / row['path']).read_text(encoding='utf-8'))
        tensor_rel = f"channels/{row['link_or_grid_id']}.dtch"
        if not (root / tensor_rel).is_file():
            raise IncompletePackageError(f"dataset_io: falta el archivo '{tensor_rel}'")
        try:
            cfr, _ = decode_tensor((root / tensor_rel).read_bytes())
        except PackageCorruptionError as e:
            raise PackageCorruptionError(tensor_rel, str(e)) from None
        paths = [_path_from_json(p) for p in meta['paths']]
        channel = ChannelResponse(
            link_id=(meta['tx_id'], meta['rx_id']),
            cir_taps=[(t['tap'], _matrix_from_json(t['matrix'])) for t in meta['cir_taps']],
            cfr=cfr, sample_rate=meta['sample_rate_hz'],
            freq_grid=np.asarray(meta['freq_grid_hz'], dtype=float),
            time=meta['time_s'], paths=paths,
        )
        links.append(LinkResult(meta['link_id'], meta['tx_id'], meta['rx_id'], paths, channel))

    grids: List[CoverageGrid] = []
    for gid, spec_dict in sorted(config_doc.get('grids', {}).items()):
        spec = GridSpec.from_dict(gid, spec_dict)
        grids.append(read_coverage_csv((root / f"coverage/{gid}.csv").read_text(encoding='utf-8'), spec))

    return ScenarioResults(scene=scene, config=config_doc['simulation'], links=links, grids=grids)
