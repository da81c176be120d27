"""End-to-end equilibrium computation: Riccati layers, dual layer, policy."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .constraints import ConstraintAdjoint, solve_constraint_adjoint
from .dual import DualProblemData, DualSolution, build_dual, solve_dual
from .follower import FollowerRiccati, solve_follower_riccati
from .leader import (
    AugmentedSystem, EquilibriumPolicy, LeaderRiccati, Psi2Solution,
    assemble_policy, build_augmented_system, solve_leader_riccati, solve_psi2,
)
from .model import ProblemSpec, validate


@dataclass(frozen=True, eq=False)
class EquilibriumSolution:
    spec: ProblemSpec
    phi1: FollowerRiccati
    aug: AugmentedSystem
    phi2: LeaderRiccati
    psi2: Psi2Solution
    adjoint: ConstraintAdjoint
    dual_data: DualProblemData
    dual: DualSolution
    policy: EquilibriumPolicy

    @property
    def lambda_star(self) -> np.ndarray:
        return self.dual.lambda_star

    def policy_for(self, lam) -> EquilibriumPolicy:
        """Leader-optimal policy of the relaxed problem at a given multiplier."""
        return self.policy.with_lambda(lam)

    def resolve_for_a(self, a) -> EquilibriumSolution:
        """Re-solve only the dual layer; everything upstream is independent of ``a``."""
        spec = self.spec.with_rhs(a)
        data = self.dual_data.with_rhs(spec.constraints.a)
        dual = solve_dual(data)
        adj = self.adjoint
        adj = replace(adj, a_tilde=spec.constraints.a + adj.offset)
        return replace(self, spec=spec, adjoint=adj, dual_data=data, dual=dual,
                       policy=self.policy.with_lambda(dual.lambda_star))


def solve_equilibrium(spec: ProblemSpec) -> EquilibriumSolution:
    validate(spec).raise_if_invalid()
    phi1 = solve_follower_riccati(spec)
    aug = build_augmented_system(spec, phi1)
    phi2 = solve_leader_riccati(aug, spec.costs.G2)
    psi2 = solve_psi2(aug, phi2, spec.constraints.delta)
    adjoint = solve_constraint_adjoint(spec, phi1)
    data = build_dual(spec, aug, phi2, psi2)
    dual = solve_dual(data)
    policy = assemble_policy(spec, phi1, phi2, psi2, dual.lambda_star)
    return EquilibriumSolution(spec, phi1, aug, phi2, psi2, adjoint, data, dual, policy)
