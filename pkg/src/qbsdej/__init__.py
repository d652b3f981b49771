"""Lattice and regression solvers for quadratic BSDEs with jumps."""

__version__ = "0.1.0"
