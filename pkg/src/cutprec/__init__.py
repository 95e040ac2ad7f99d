"""Unfitted finite element solvers for interface and fictitious-domain
Poisson problems with subspace-decomposition block preconditioners."""

__version__ = "0.1.0"
