#!/usr/bin/env python3
"""
Script: cli.py
Ubicación: channel_twin/

Front-end por lotes del simulador: une la configuración con el pipeline
trazado → síntesis de canal → cobertura → paquete.

Uso:
  channel-twin validate <cfg> [-v]
  channel-twin run <cfg> -o <dir> [--threads N] [--seed S] [-v]
  channel-twin coverage <cfg> --grid <id> -o <img> [--threads N] [-v]

Códigos de salida: 0 éxito, 1 fallo de validación, 2 fallo en ejecución.
Nivel de log: -v repetible o variable de entorno CHANNEL_TWIN_LOG_LEVEL.
"""
import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import List, Optional

from rich.console import Console
from rich.table import Table

from .channel_synthesis import synthesize_link, time_series_channel
from .cli_utils import configure_logging, safe_print, write_atomic
from .config import SimulationConfig, load_config, prepare_scene, validate_config
from .coverage import compute_coverage, rasterize, write_coverage_csv
from .dataset_io import LinkResult, ScenarioPackage, ScenarioResults, write_package
from .errors import ChannelTwinError, ConfigError, PackageExistsError
from .ray_engine import TraceStats, build_bvh, trace_paths

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


def _default_threads() -> int:
    return os.cpu_count() or 1


def _trace_kwargs(cfg: SimulationConfig, panels, threads: int, tx) -> dict:
    return {
        'tx_power': tx.tx_power_w,
        'polarization': cfg.polarization,
        'diffraction': cfg.diffraction,
        'ris_panels': panels,
        'threads': threads,
    }


def simulate(cfg: SimulationConfig, threads: int = 1, stats: Optional[TraceStats] = None,
             grid_ids: Optional[List[str]] = None, links: bool = True) -> ScenarioResults:
    """Ejecuta el pipeline completo en memoria."""
    stats = stats if stats is not None else TraceStats()
    scene, panels = prepare_scene(cfg)
    bvh = build_bvh(scene) if scene.triangle_count else None
    launch = cfg.launch_directions()
    lam = scene.wavelength
    results = ScenarioResults(scene=scene, config=cfg.document)

    if links and cfg.receivers:
        for tx in cfg.transmitters:
            kwargs = _trace_kwargs(cfg, panels, threads, tx)
            per_rx = trace_paths(scene, bvh, tx.position, [rx.position for rx in cfg.receivers],
                                 cfg.policy, launch, cfg.capture_radius,
                                 tx_velocity=tx.velocity,
                                 rx_velocities=[rx.velocity for rx in cfg.receivers],
                                 stats=stats, **kwargs)
            for rx, paths in zip(cfg.receivers, per_rx):
                link_id = f"{tx.id}__{rx.id}"
                channel = synthesize_link((tx.id, rx.id), paths, tx.array, rx.array, lam,
                                          cfg.bandwidth, cfg.cfr_points)
                results.links.append(LinkResult(link_id, tx.id, rx.id, paths, channel))
                log.info("Enlace %s: %d caminos", link_id, len(paths))
                if cfg.snapshots:
                    series = time_series_channel(scene, bvh, tx, rx, cfg.snapshots, cfg.policy, launch,
                                                 cfg.bandwidth, cfg.cfr_points, cfg.capture_radius,
                                                 stats=stats, **kwargs)
                    for k, ch in enumerate(series):
                        results.links.append(LinkResult(f"{link_id}__t{k:03d}", tx.id, rx.id, ch.paths, ch))

    for gid in (grid_ids if grid_ids is not None else sorted(cfg.grids)):
        grid_cfg = cfg.grids[gid]
        tx = cfg.terminal(grid_cfg.tx_id)
        grid = compute_coverage(scene, bvh, tx, grid_cfg.spec, cfg.policy, launch, cfg.capture_radius,
                                stats=stats, **_trace_kwargs(cfg, panels, threads, tx))
        results.grids.append(grid)
    return results


def _summary(results: ScenarioResults, stats: TraceStats, elapsed: float) -> None:
    console = Console()
    table = Table(title="Resumen de la simulación")
    table.add_column("Enlace / rejilla")
    table.add_column("Caminos", justify="right")
    table.add_column("Detalle")
    for link in results.links:
        kinds = sorted({e.kind for p in link.paths for e in p.interactions})
        table.add_row(link.link_id, str(len(link.paths)), ", ".join(kinds) or "LOS")
    for grid in results.grids:
        covered = int(grid.covered.sum())
        table.add_row(grid.spec.grid_id, "-", f"{covered}/{grid.values.size} celdas con señal")
    console.print(table)
    console.print(f"Rayos lanzados: {stats.rays_launched}  segmentos: {stats.segments_traced}  "
                  f"tiempo: {elapsed:.2f} s")


# ── Subcomandos ─────────────────────────────────────────────────────────────

def cmd_validate(args) -> int:
    report = validate_config(Path(args.config))
    safe_print(json.dumps(report, ensure_ascii=False, indent=2))
    return EXIT_OK if report['ok'] else EXIT_VALIDATION


def cmd_run(args) -> ScenarioPackage:
    out = Path(args.output)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise PackageExistsError(f"dataset_io: el destino '{out}' no está vacío")
    cfg = load_config(Path(args.config), seed=args.seed)
    stats = TraceStats()
    start = time.perf_counter()
    results = simulate(cfg, threads=args.threads, stats=stats)
    package = write_package(results, out)
    _summary(results, stats, time.perf_counter() - start)
    return package


def cmd_coverage(args) -> Path:
    cfg = load_config(Path(args.config))
    if args.grid not in cfg.grids:
        available = ", ".join(sorted(cfg.grids)) or "(ninguna)"
        raise ConfigError([('grid', f"cli: rejilla desconocida '{args.grid}'; disponibles: {available}")])
    results = simulate(cfg, threads=args.threads, grid_ids=[args.grid], links=False)
    grid = results.grids[0]
    image = Path(args.output)
    write_atomic(image, rasterize(grid))
    write_atomic(image.with_suffix('.csv'), write_coverage_csv(grid))
    safe_print(f"✅ Cobertura '{args.grid}' escrita en {image}")
    return image


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='channel-twin',
                                     description="Simulador determinista de trazado de rayos radio.")
    parser.add_argument('-v', '--verbose', action='count', default=0,
                        help="Aumenta el detalle del log (-v INFO, -vv DEBUG).")
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('validate', help="Valida configuración y escena; imprime un informe JSON.")
    p.add_argument('config', type=Path)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser('run', help="Traza, sintetiza canales y escribe el paquete de escenario.")
    p.add_argument('config', type=Path)
    p.add_argument('-o', '--output', type=Path, required=True, help="Directorio del paquete (vacío).")
    p.add_argument('--threads', type=int, default=_default_threads(),
                   help="Hilos de trazado (default: núcleos disponibles).")
    p.add_argument('--seed', type=int, default=None, help="Sobreescribe la semilla de la configuración.")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser('coverage', help="Calcula una rejilla de cobertura y escribe PPM + CSV.")
    p.add_argument('config', type=Path)
    p.add_argument('--grid', required=True, help="Identificador de la rejilla.")
    p.add_argument('-o', '--output', type=Path, required=True, help="Imagen PPM de salida.")
    p.add_argument('--threads', type=int, default=_default_threads())
    p.set_defaults(func=cmd_coverage)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    if getattr(args, 'threads', 1) < 1:
        safe_print("❌ --threads debe ser ≥ 1")
        return EXIT_VALIDATION
    try:
        result = args.func(args)
    except ConfigError as e:
        for check, message in e.issues:
            safe_print(f"❌ {check}: {message}")
        return EXIT_VALIDATION
    except ChannelTwinError as e:
        safe_print(f"❌ {e}")
        return EXIT_RUNTIME
    except OSError as e:
        log.debug("Fallo de E/S", exc_info=True)
        safe_print(f"❌ Error de E/S: {e}")
        return EXIT_RUNTIME
    except Exception as e:
        log.error("Fallo inesperado en '%s'", args.command, exc_info=True)
        safe_print(f"❌ {type(e).__name__}: {e}")
        return EXIT_RUNTIME
    return result if isinstance(result, int) else EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
