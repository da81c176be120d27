"""Shared fixtures and independent oracles.

The oracles integrate the same equations with scipy's adaptive RK45/DOP853 at
tight tolerances, using the solver's coefficient paths as functions of time.
"""

from __future__ import annotations

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from stackelberg_lq.examples import equality_game, inequality_game
from stackelberg_lq.model import ConstraintSpec, CostSpec, Dynamics, MatrixPath, ProblemSpec, TimeGrid
from stackelberg_lq.pipeline import solve_equilibrium

ORACLE_TOL = dict(rtol=1e-12, atol=1e-12, method="DOP853")


@pytest.fixture(scope="session")
def eq_solution():
    return solve_equilibrium(equality_game(0.0))


@pytest.fixture(scope="session")
def ineq_solution():
    return solve_equilibrium(inequality_game(1.0))


def random_spec(rng: np.random.Generator, n: int, m: int, l: int, l_prime: int = 0,
                n_steps: int = 2000, C_scale: float = 0.3) -> ProblemSpec:
    """Well-posed game with smooth time-varying coefficients and definite weights."""
    grid = TimeGrid(0.0, 1.0, n_steps)
    t = grid.times[:, None, None]

    def smooth(rows, cols, scale):
        a0, a1 = scale * rng.standard_normal((2, rows, cols))
        return MatrixPath(grid, a0 + a1 * np.sin(2.0 * t))

    def spd(k, base):
        R = rng.standard_normal((k, k)) * 0.3
        S = base * np.eye(k) + R @ R.T
        return MatrixPath(grid, S[None] * (1.0 + 0.2 * np.cos(t)))

    def sym_const(k, scale):
        R = rng.standard_normal((k, k)) * scale
        return R @ R.T

    dyn = Dynamics(A=smooth(n, n, 0.4), B1=smooth(n, m, 0.5), B2=smooth(n, m, 0.5), C=smooth(n, n, C_scale),
                   xi=rng.standard_normal(n))
    costs = CostSpec(D1=spd(n, 0.5), E1=spd(m, 1.0), G1=sym_const(n, 0.5),
                     D2=spd(n, 0.5), E2=spd(m, 1.0), G2=sym_const(n, 0.5))
    if l:
        cons = ConstraintSpec(alpha=smooth(n, l, 1.0), beta=smooth(m, l, 1.0), gamma=smooth(m, l, 1.0),
                              delta=rng.standard_normal((n, l)), a=rng.standard_normal(l), l_prime=l_prime)
    else:
        cons = ConstraintSpec.empty(grid, n, m)
    return ProblemSpec(dyn, costs, cons, grid)


def oracle_riccati_chain(spec: ProblemSpec, leader_minus: bool = True):
    """Jointly integrate phi1, phi2 and psi2 backward with an adaptive integrator.

    Returns a function of time giving ``(phi1, phi2, psi2)``.
    """
    n, m, l = spec.n, spec.m, spec.l
    dyn, co, cons = spec.dynamics, spec.costs, spec.constraints
    s, T = spec.grid.s, spec.grid.T
    inv = np.linalg.inv

    def unpack(y):
        p1 = y[: n * n].reshape(n, n)
        p2 = y[n * n: n * n + 4 * n * n].reshape(2 * n, 2 * n)
        q2 = y[n * n + 4 * n * n:].reshape(2 * n, l)
        return p1, p2, q2

    def rhs(t, y):
        p1, p2, q2 = unpack(y)
        A, B1, B2, C = dyn.A(t), dyn.B1(t), dyn.B2(t), dyn.C(t)
        E1i, E2i = inv(co.E1(t)), inv(co.E2(t))
        S1, S2 = B1 @ E1i @ B1.T, B2 @ E2i @ B2.T
        dp1 = -(co.D1(t) + p1 @ A + A.T @ p1 + C.T @ p1 @ C - p1 @ S1 @ p1)
        Z = np.zeros((n, n))
        cl = A - S1 @ p1
        Ab = np.block([[cl, S2 @ p1], [Z, cl]])
        Fb = np.block([[S2, -S1], [-S1, Z]])
        sign = -1.0 if leader_minus else 1.0
        Db = np.block([[co.D2(t), Z], [Z, sign * p1 @ S2 @ p1]])
        Cb = np.block([[C, Z], [Z, C]])
        dp2 = -(Ab.T @ p2 + p2 @ Ab + Cb.T @ p2 @ Cb - p2 @ Fb @ p2 + Db)
        al, be, ga = cons.alpha(t), cons.beta(t), cons.gamma(t)
        fZ = np.vstack([-B2 @ E2i @ ga, B1 @ E1i @ be])
        fP = np.vstack([al - p1 @ B1 @ E1i @ be, p1 @ B2 @ E2i @ ga])
        dq2 = -((Ab.T - p2 @ Fb) @ q2 + fP + p2 @ fZ)
        return np.concatenate([dp1.ravel(), dp2.ravel(), dq2.ravel()])

    P2T = np.zeros((2 * n, 2 * n))
    P2T[:n, :n] = co.G2
    Q2T = np.vstack([cons.delta, np.zeros((n, l))])
    y0 = np.concatenate([co.G1.ravel(), P2T.ravel(), Q2T.ravel()])
    sol = solve_ivp(rhs, (T, s), y0, dense_output=True, **ORACLE_TOL)
    assert sol.success
    return lambda t: unpack(sol.sol(t))


def oracle_rho(spec: ProblemSpec, u2_fn):
    """Constraint functionals for a deterministic leader control by direct ODE evaluation.

    Integrates the follower adjoint offset backward, then the mean state
    forward, and accumulates the constraint integrand along the way.
    """
    n, l = spec.n, spec.l
    dyn, co, cons = spec.dynamics, spec.costs, spec.constraints
    s, T = spec.grid.s, spec.grid.T
    inv = np.linalg.inv
    chain = oracle_riccati_chain(spec)

    def psi_rhs(t, y):
        p1 = chain(t)[0]
        S1 = dyn.B1(t) @ inv(co.E1(t)) @ dyn.B1(t).T
        return -((dyn.A(t).T - p1 @ S1) @ y + p1 @ dyn.B2(t) @ u2_fn(t))

    psi = solve_ivp(psi_rhs, (T, s), np.zeros(n), dense_output=True, **ORACLE_TOL)

    def fwd(t, y):
        x = y[:n]
        p1 = chain(t)[0]
        E1i = inv(co.E1(t))
        S1 = dyn.B1(t) @ E1i @ dyn.B1(t).T
        ps = psi.sol(t)
        u2 = u2_fn(t)
        dx = (dyn.A(t) - S1 @ p1) @ x - S1 @ ps + dyn.B2(t) @ u2
        u1 = -E1i @ dyn.B1(t).T @ (p1 @ x + ps)
        drho = cons.alpha(t).T @ x + cons.beta(t).T @ u1 + cons.gamma(t).T @ u2
        return np.concatenate([dx, drho])

    out = solve_ivp(fwd, (s, T), np.concatenate([dyn.xi, np.zeros(l)]), **ORACLE_TOL)
    xT = out.y[:n, -1]
    return out.y[n:, -1] + cons.delta.T @ xT


def grid_search_dual(data, step=2.5e-4):
    """Exhaustive search over the cone box, coarse first and then at ``step`` around the coarse optimum.

    The fine step sits below the 1e-3 comparison tolerance: with an ill-conditioned S0 the best
    point of a 1e-3 lattice can lie more than one step from the true maximizer.
    """
    l = data.l
    L = 10 * (1 + np.linalg.norm(data.b) / max(np.trace(data.S0), 1.0))
    lo = np.where(np.arange(l) < data.l_prime, 0.0, -L)

    def best(axes):
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, l)
        vals = 2 * pts @ data.b - np.einsum("pi,ij,pj->p", pts, data.S0, pts)
        return pts[np.argmax(vals)]

    coarse = 2 * L / 400
    top = best([np.arange(lo[i], L + coarse / 2, coarse) for i in range(l)])
    return best([np.arange(max(lo[i], top[i] - 2 * coarse), top[i] + 2 * coarse + step / 2, step) for i in range(l)])
