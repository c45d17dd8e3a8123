"""Adaptive FEM simulator for the stochastic Cahn-Hilliard equation."""

from . import adaptivity, eigenvalue, estimators, fem, harness, mesh, noise, scheme
from .errors import InputError, PreconditionError, SolverFailure, StructuralError

__all__ = [
    "adaptivity",
    "eigenvalue",
    "estimators",
    "fem",
    "harness",
    "mesh",
    "noise",
    "scheme",
    "InputError",
    "PreconditionError",
    "SolverFailure",
    "StructuralError",
]

__version__ = "0.1.0"
