#!/usr/bin/env python3
"""
Script: verify_package.py
Ubicación: channel_twin/scripts/

Comprueba la integridad de un paquete de escenario ya escrito:
  - Valida digests SHA-256 y completitud frente a manifest.csv.
  - Verifica que cada tensor .dtch decodifique y coincida con su JSON lateral.
  - Muestra un conteo final por rol y sale con código 1 si hay problemas.

Uso:
  python3 channel_twin/scripts/verify_package.py <directorio-del-paquete>
"""
import sys
import json
from collections import Counter
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent.parent))
from channel_twin.cli_utils import safe_print
from channel_twin.dataset_io import decode_tensor, verify_package
from channel_twin.errors import PackageError


def check_tensors(root: Path, rows) -> list:
    bad = []
    for row in rows:
        if row['role'] != 'channel_tensor':
            continue
        try:
            tensor, _ = decode_tensor((root / row['path']).read_bytes())
        except PackageError as e:
            bad.append(f"{row['path']} → {e}")
            continue
        meta_path = root / row['path'].replace('.dtch', '.json')
        try:
            meta = json.loads(meta_path.read_text(encoding='utf-8'))
        except Exception as e:
            bad.append(f"JSON lateral ilegible: {meta_path.name} → {e}")
            continue
        if tensor.shape[2] != len(meta['freq_grid_hz']):
            bad.append(f"{row['path']}: {tensor.shape[2]} puntos de CFR, "
                       f"el JSON declara {len(meta['freq_grid_hz'])}")
    return bad


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 1:
        safe_print("Uso: verify_package.py <directorio-del-paquete>")
        sys.exit(1)
    root = Path(argv[0])
    if not root.is_dir():
        safe_print(f"❌ Directorio no encontrado: {root}")
        sys.exit(1)

    try:
        rows = verify_package(root)
    except PackageError as e:
        safe_print(f"❌ {e}")
        sys.exit(1)

    bad = check_tensors(root, rows)
    roles = Counter(row['role'] for row in rows)

    safe_print(f"\n📋 Verificación: {root.name}/")
    safe_print(f"  Archivos en manifiesto : {len(rows)}")
    for role in sorted(roles):
        safe_print(f"    {role:<16} : {roles[role]}")
    if bad:
        safe_print(f"  ❌ Con problemas       : {len(bad)}")
        for b in bad:
            safe_print(f"     — {b}")
        sys.exit(1)
    safe_print("  ✅ Todo en orden.")


if __name__ == '__main__':
    main()
