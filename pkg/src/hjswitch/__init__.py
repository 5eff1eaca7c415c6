"""Solvers and verification tools for weakly coupled Hamilton-Jacobi systems
with random index switching."""

__version__ = "0.1.0"
