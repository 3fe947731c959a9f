"""Distributed neural Lyapunov certification for networked dissipative systems."""

__version__ = "0.1.0"
