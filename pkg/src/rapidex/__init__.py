"""Frontier-based rapid exploration: occupancy mapping, safe frontiers,
next-best-frontier selection, risk-aware planning and a mission simulator."""

__version__ = "0.1.0"
