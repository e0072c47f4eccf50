"""Convergence-rate laboratory for 1D reaction-diffusion problems with
nonlinear Robin boundary conditions."""
from .family import CoefficientError, CoefficientFamily, Reaction, default_family, linear_family
from .fem import (
    DiscreteOperator,
    DiscreteState,
    Mesh1D,
    assemble_operator,
    energy_norm,
    h1_norm,
    l2_norm,
    operator_gap_norm,
    resolvent_solve,
    solve_elliptic,
)

__version__ = "0.1.0"
