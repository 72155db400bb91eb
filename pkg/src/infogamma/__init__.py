"""Curvature and decay-rate numerics for non-reversible Langevin dynamics."""

__version__ = "0.1.0"
