"""Moment relaxations for impulsive polynomial optimal control."""

from .poly import Polynomial, enumerate_basis
from .model import BoundaryCondition, ImpulsiveOCP, SemialgebraicSet
from .sdp import SolverOptions, SolveResult
from .relax import RelaxationResult, solve_hierarchy, solve_relaxation

__version__ = "0.1.0"

__all__ = [
    "Polynomial",
    "enumerate_basis",
    "BoundaryCondition",
    "ImpulsiveOCP",
    "SemialgebraicSet",
    "SolverOptions",
    "SolveResult",
    "RelaxationResult",
    "solve_hierarchy",
    "solve_relaxation",
]
