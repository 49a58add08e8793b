#!/usr/bin/env python3
"""
Módulo: cli_utils.py
Ubicación: channel_twin/

Utilidades comunes de la CLI y del empaquetado:
- safe_print          → Imprime mensajes evitando errores de codificación (emojis).
- configure_logging   → Nivel por -v repetible o CHANNEL_TWIN_LOG_LEVEL.
- write_atomic        → Escribe bytes/texto en un temporal y lo renombra.
- hash_file_streaming → SHA-256 en bloques de 64 KB.
- load_noise_spec     → PathSpec con archivos ruido del sistema operativo.
- is_ignored          → Verifica si una ruta relativa coincide con el PathSpec.
"""
import hashlib
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Iterable, Optional, Union

from pathspec import PathSpec

LOG_LEVEL_ENV = 'CHANNEL_TWIN_LOG_LEVEL'
LOG_FORMAT = '[%(levelname)s] %(message)s'

# Archivos que el sistema operativo o los editores dejan en cualquier carpeta
NOISE_PATTERNS = ('.DS_Store', 'Thumbs.db', 'desktop.ini', '*.swp', '*~', '__MACOSX/')


def safe_print(message: str) -> None:
    """Imprime cadena sin fallar si la consola no soporta algunos caracteres."""
    try:
        print(message)
    except UnicodeEncodeError:
        encoding = sys.stdout.encoding or 'utf-8'
        filtered = message.encode(encoding, errors='ignore').decode(encoding)
        print(filtered)


def resolve_log_level(verbose: int = 0) -> int:
    """-v manda; sin -v se consulta la variable de entorno; por defecto WARNING."""
    if verbose:
        return max(logging.DEBUG, logging.WARNING - 10 * verbose)
    env = os.environ.get(LOG_LEVEL_ENV, '').strip().upper()
    if env:
        level = logging.getLevelName(env)
        if isinstance(level, int):
            return level
    return logging.WARNING


def configure_logging(verbose: int = 0) -> int:
    level = resolve_log_level(verbose)
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)
    return level


def write_atomic(path: Path, content: Union[str, bytes]) -> None:
    """Escribe de forma atómica reemplazando el archivo destino."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    binary = isinstance(content, bytes)
    tmp = tempfile.NamedTemporaryFile(
        'wb' if binary else 'w',
        delete=False,
        encoding=None if binary else 'utf-8',
        newline=None if binary else '',
        dir=path.parent
    )
    with tmp:
        tmp.write(content)
    Path(tmp.name).replace(path)
    logging.getLogger(__name__).info("Escrito %s", path)


def hash_file_streaming(path: Path) -> str:
    """Calcula SHA-256 en bloques de 64 KB sin cargar el archivo completo en memoria."""
    h = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(65536), b''):
            h.update(chunk)
    return h.hexdigest()


def load_noise_spec(extra: Optional[Iterable[str]] = None) -> PathSpec:
    """Compila los patrones de ruido (más los extra) con sintaxis gitwildmatch."""
    lines = list(NOISE_PATTERNS) + [ln.strip() for ln in (extra or ()) if ln.strip()]
    return PathSpec.from_lines('gitwildmatch', lines)


def is_ignored(path: Union[str, Path], ignore_spec: Optional[PathSpec]) -> bool:
    if ignore_spec is None:
        return False
    return ignore_spec.match_file(str(path))
