"""Certified finite-cokernel solvers for underdetermined constant-coefficient operators."""

__version__ = "0.1.0"
