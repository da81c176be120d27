"""The leader's problem on the augmented state ``Z = [X; Y]`` of size ``2n``.

Substituting the follower's best response turns the leader's problem into an
LQ problem for ``Z`` whose adjoint decouples as ``P = -phi2 Z - psi2 lam``,
where ``lam`` is the vector of constraint multipliers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .follower import FollowerRiccati
from .model import MatrixPath, ProblemSpec, derived_coefficients, sym
from .odes import BlowupError, OdeProblem, integrate, residual


@dataclass(frozen=True, eq=False)
class AugmentedSystem:
    A_bar: MatrixPath
    F_bar: MatrixPath
    D_bar: MatrixPath
    C_bar: MatrixPath
    B2_bar: MatrixPath
    f_Z: MatrixPath
    f_P: MatrixPath

    @property
    def size(self) -> int:
        return self.A_bar.rows


def _blocks(tl, tr, bl, br) -> np.ndarray:
    return np.concatenate([np.concatenate([tl, tr], axis=2), np.concatenate([bl, br], axis=2)], axis=1)


def build_augmented_system(spec: ProblemSpec, phi1: FollowerRiccati) -> AugmentedSystem:
    if phi1.phi1.grid != spec.grid:
        raise ValueError("phi1 must be solved on the spec grid")
    n, m, l = spec.n, spec.m, spec.l
    if phi1.phi1.shape != (n, n):
        raise ValueError(f"phi1 has shape {phi1.phi1.shape}, expected {(n, n)}")
    d = derived_coefficients(spec)
    g = spec.grid
    N1 = g.n_steps + 1
    A, C = spec.dynamics.A.values, spec.dynamics.C.values
    B1, B2 = spec.dynamics.B1.values, spec.dynamics.B2.values
    S1, S2 = d.S1.values, d.S2.values
    phi = phi1.phi1.values
    zero = np.zeros((N1, n, n))

    closed = A - S1 @ phi
    A_bar = _blocks(closed, S2 @ phi, zero, closed)
    F_bar = sym(_blocks(S2, -S1, -S1, zero))
    # the follower-adjoint block enters with a minus sign, see the decoupling of psi1
    D_bar = sym(_blocks(spec.costs.D2.values, zero, zero, -(phi @ S2 @ phi)))
    C_bar = _blocks(C, zero, zero, C)
    B2_bar = np.concatenate([np.zeros((N1, n, m)), phi @ B2], axis=1)

    cons = spec.constraints
    E1b = d.E1_inv.values @ cons.beta.values
    E2g = d.E2_inv.values @ cons.gamma.values
    f_Z = np.concatenate([-B2 @ E2g, B1 @ E1b], axis=1)
    f_P = np.concatenate([cons.alpha.values - phi @ B1 @ E1b, phi @ B2 @ E2g], axis=1)
    assert f_Z.shape == (N1, 2 * n, l)

    wrap = lambda v: MatrixPath(g, v)
    return AugmentedSystem(wrap(A_bar), wrap(F_bar), wrap(D_bar), wrap(C_bar), wrap(B2_bar), wrap(f_Z), wrap(f_P))


@dataclass(frozen=True, eq=False)
class LeaderRiccati:
    phi2: MatrixPath
    problem: OdeProblem

    def residual(self) -> float:
        return residual(self.phi2, self.problem, self.phi2.grid)


@dataclass(frozen=True, eq=False)
class Psi2Solution:
    psi2: MatrixPath
    problem: OdeProblem

    def residual(self) -> float:
        return residual(self.psi2, self.problem, self.psi2.grid)


def leader_riccati_problem(aug: AugmentedSystem, G2) -> OdeProblem:
    G2 = np.atleast_2d(np.asarray(G2, dtype=float))
    n = G2.shape[0]
    if aug.size != 2 * n:
        raise ValueError(f"G2 is {n}x{n} but the augmented system has size {aug.size}")
    terminal = np.zeros((2 * n, 2 * n))
    terminal[:n, :n] = G2
    Ab, Fb, Db, Cb = aug.A_bar, aug.F_bar, aug.D_bar, aug.C_bar

    def rhs(t, phi):
        a, c = Ab(t), Cb(t)
        return -(a.T @ phi + phi @ a + c.T @ phi @ c - phi @ Fb(t) @ phi + Db(t))

    return OdeProblem(rhs, terminal, "backward", symmetrize=True, name="leader Riccati")


def solve_leader_riccati(aug: AugmentedSystem, G2) -> LeaderRiccati:
    problem = leader_riccati_problem(aug, G2)
    try:
        phi2 = integrate(problem, aug.A_bar.grid)
    except BlowupError as exc:
        raise BlowupError(f"H3 fails numerically on [s,T] ({exc})", "leader Riccati", exc.time) from exc
    return LeaderRiccati(phi2, problem)


def psi2_problem(aug: AugmentedSystem, phi2: LeaderRiccati, delta) -> OdeProblem:
    delta = np.asarray(delta, dtype=float)
    n = aug.size // 2
    delta = delta.reshape(n, -1)
    terminal = np.concatenate([delta, np.zeros_like(delta)], axis=0)
    Ab, Fb, fZ, fP, P2 = aug.A_bar, aug.F_bar, aug.f_Z, aug.f_P, phi2.phi2

    def rhs(t, psi):
        p = P2(t)
        return -((Ab(t).T - p @ Fb(t)) @ psi + fP(t) + p @ fZ(t))

    return OdeProblem(rhs, terminal, "backward", name="leader psi2")


def solve_psi2(aug: AugmentedSystem, phi2: LeaderRiccati, delta) -> Psi2Solution:
    problem = psi2_problem(aug, phi2, delta)
    return Psi2Solution(integrate(problem, aug.A_bar.grid), problem)


@dataclass(frozen=True, eq=False)
class EquilibriumPolicy:
    """``u1 = K1 Z + k1 lam`` and ``u2 = K2 Z + k2 lam`` on the augmented state."""

    K1: MatrixPath
    k1: MatrixPath
    K2: MatrixPath
    k2: MatrixPath
    lam: np.ndarray

    def controls(self, k: int, Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Controls at grid index ``k`` for a batch ``Z`` of shape (paths, 2n)."""
        u1 = Z @ self.K1[k].T + self.k1[k] @ self.lam
        u2 = Z @ self.K2[k].T + self.k2[k] @ self.lam
        return u1, u2

    def with_lambda(self, lam) -> EquilibriumPolicy:
        return EquilibriumPolicy(self.K1, self.k1, self.K2, self.k2, np.asarray(lam, dtype=float).reshape(-1))


def assemble_policy(spec: ProblemSpec, phi1: FollowerRiccati, phi2: LeaderRiccati, psi2: Psi2Solution, lam) -> EquilibriumPolicy:
    lam = np.asarray(lam, dtype=float).reshape(-1)
    if lam.size != spec.l:
        raise ValueError(f"expected {spec.l} multipliers, got {lam.size}")
    return assemble_policy_arrays(spec, phi1.phi1.values, phi2.phi2.values, psi2.psi2.values, lam)


def assemble_policy_arrays(spec: ProblemSpec, phi1: np.ndarray, phi2: np.ndarray, psi2: np.ndarray, lam) -> EquilibriumPolicy:
    """Gains from raw stacked arrays; lets callers inject closed-form solutions."""
    d = derived_coefficients(spec)
    n, g = spec.n, spec.grid
    B1T = np.swapaxes(spec.dynamics.B1.values, 1, 2)
    B2T = np.swapaxes(spec.dynamics.B2.values, 1, 2)
    E1i, E2i = d.E1_inv.values, d.E2_inv.values
    zm = np.zeros_like(B1T)
    top = lambda M: M[:, :n, :]
    bottom = lambda M: M[:, n:, :]

    # [0, B1^T] phi2 - [B1^T phi1, 0]
    K1 = E1i @ (B1T @ bottom(phi2) - np.concatenate([B1T @ phi1, zm], axis=2))
    k1 = E1i @ (B1T @ bottom(psi2))
    # [0, B2^T phi1] - [B2^T, 0] phi2
    K2 = E2i @ (np.concatenate([zm, B2T @ phi1], axis=2) - B2T @ top(phi2))
    k2 = -E2i @ (B2T @ top(psi2) + spec.constraints.gamma.values)
    wrap = lambda v: MatrixPath(g, v)
    return EquilibriumPolicy(wrap(K1), wrap(k1), wrap(K2), wrap(k2), np.asarray(lam, dtype=float).reshape(-1))
