"""Feedback equilibria of linear-quadratic stochastic Stackelberg games with affine constraints."""

from .model import (
    ConstraintSpec, CostSpec, Dynamics, InvalidSpecError, MatrixPath, ProblemSpec,
    SingularMatrixError, TimeGrid, ValidationReport, derived_coefficients, validate,
)
from .odes import BlowupError, IntegrationError, NonFiniteError, OdeProblem, integrate, residual
from .follower import solve_follower_riccati, solve_psi1
from .leader import assemble_policy, build_augmented_system, solve_leader_riccati, solve_psi2
from .dual import build_dual, rho_of_lambda, solve_dual
from .pipeline import EquilibriumSolution, solve_equilibrium

__version__ = "0.1.0"
