"""
Módulo: errors.py
Ubicación: channel_twin/

Jerarquía de excepciones del simulador. Todas heredan de ChannelTwinError
para que la CLI pueda distinguir fallos del dominio de errores inesperados.

- ChannelTwinError        → base común.
- SceneParseError         → XML mal formado (con línea/columna).
- SceneSemanticError      → referencias sin resolver, triángulos degenerados.
- MaterialAssignmentError → base de los fallos de reglas de nombres.
- InvalidPoseError        → rotación no ortonormal.
- InvalidArgumentError    → precondición de operación violada.
- InvalidGeometryError    → geometría fuera del cono de Keller.
- OptimizationError       → objetivo no finito en el optimizador RIS.
- ConfigError             → documento de simulación inválido.
- PackageError            → base de errores de paquete en disco.
"""
from typing import Iterable, List, Optional, Tuple


class ChannelTwinError(Exception):
    """Error base del paquete."""


class SceneParseError(ChannelTwinError):
    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        self.line = line
        self.column = column
        where = f" (línea {line}, columna {column})" if line is not None else ""
        super().__init__(f"scene_model: {message}{where}")


class SceneSemanticError(ChannelTwinError):
    pass


class MaterialAssignmentError(ChannelTwinError):
    pass


class UnmatchedNameError(MaterialAssignmentError):
    def __init__(self, names: Iterable[str]):
        self.names: List[str] = sorted(names)
        super().__init__(
            "assign_materials_by_name: objetos sin regla: " + ", ".join(self.names)
        )


class AmbiguousRuleError(MaterialAssignmentError):
    def __init__(self, name: str, keys: Iterable[str]):
        self.name = name
        self.keys: List[str] = sorted(keys)
        super().__init__(
            f"assign_materials_by_name: '{name}' coincide con varias reglas: "
            + ", ".join(self.keys)
        )


class InvalidPoseError(ChannelTwinError):
    pass


class InvalidArgumentError(ChannelTwinError, ValueError):
    pass


class InvalidGeometryError(ChannelTwinError):
    pass


class OptimizationError(ChannelTwinError):
    pass


class ConfigError(ChannelTwinError):
    """Lleva la lista de problemas [(check, mensaje), ...] detectados."""

    def __init__(self, issues: Iterable[Tuple[str, str]]):
        self.issues: List[Tuple[str, str]] = list(issues)
        super().__init__("config: " + "; ".join(f"{c}: {m}" for c, m in self.issues))


class PackageError(ChannelTwinError):
    pass


class PackageExistsError(PackageError):
    pass


class PackageCorruptionError(PackageError):
    def __init__(self, path: str, detail: str = "digest no coincide"):
        self.path = path
        super().__init__(f"dataset_io: archivo corrupto '{path}': {detail}")


class IncompletePackageError(PackageError):
    pass
