"""Ready-made scalar games used by the tests and the CLI demos.

Both games share ``dX = [X + u1/2 + u2/2] dt + X dB`` on ``[0, 1]`` with
``X(0) = 1``, follower weights ``D1 = -2, E1 = 4, G1 = 1`` and leader weights
``D2 = 2, E2 = 4, G2 = -1``. The single constraint is

    E int_0^1 [(1 - e^{-t}) X + 2 u1 + 2 e^{-t} u2] dt  (=, <=)  a,

an equality in :func:`equality_game` and an inequality in :func:`inequality_game`.
"""

from __future__ import annotations

import numpy as np

from .model import ConstraintSpec, CostSpec, Dynamics, MatrixPath, ProblemSpec, TimeGrid


def scalar_game(n_steps: int = 2000, constraint: str | None = "eq", a: float = 0.0) -> ProblemSpec:
    grid = TimeGrid(0.0, 1.0, n_steps)
    const = lambda v: MatrixPath.constant(grid, [[v]])
    dyn = Dynamics(A=const(1.0), B1=const(0.5), B2=const(0.5), C=const(1.0), xi=[1.0])
    costs = CostSpec(D1=const(-2.0), E1=const(4.0), G1=[[1.0]], D2=const(2.0), E2=const(4.0), G2=[[-1.0]])
    if constraint is None:
        cons = ConstraintSpec.empty(grid, 1, 1)
    else:
        if constraint not in ("eq", "ineq"):
            raise ValueError("constraint must be 'eq', 'ineq' or None")
        cons = ConstraintSpec(
            alpha=MatrixPath.from_function(grid, lambda t: [[1.0 - np.exp(-t)]]),
            beta=const(2.0),
            gamma=MatrixPath.from_function(grid, lambda t: [[2.0 * np.exp(-t)]]),
            delta=np.zeros((1, 1)),
            a=[a],
            l_prime=1 if constraint == "ineq" else 0,
        )
    return ProblemSpec(dyn, costs, cons, grid)


def equality_game(a: float = 0.0, n_steps: int = 2000) -> ProblemSpec:
    return scalar_game(n_steps, "eq", a)


def inequality_game(a: float = 0.0, n_steps: int = 2000) -> ProblemSpec:
    return scalar_game(n_steps, "ineq", a)
