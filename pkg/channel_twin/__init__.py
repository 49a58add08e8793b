"""Simulador determinista de trazado de rayos radio y generador de paquetes de escenario."""
__version__ = "0.1.0"
