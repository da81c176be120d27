"""The follower's best response to an announced leader control.

With deterministic coefficients the follower's stochastic Riccati equation is a
plain matrix Riccati ODE and its martingale part vanishes. The best response is
the feedback ``u1 = -E1^{-1} B1^T (phi1 X + psi1)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import DerivedCoefficients, MatrixPath, ProblemSpec, derived_coefficients
from .odes import BlowupError, OdeProblem, integrate, residual


@dataclass(frozen=True, eq=False)
class FollowerRiccati:
    phi1: MatrixPath
    problem: OdeProblem
    # martingale component is identically zero for deterministic coefficients
    martingale_zero: bool = True

    def residual(self) -> float:
        return residual(self.phi1, self.problem, self.phi1.grid)


@dataclass(frozen=True, eq=False)
class FollowerFeedback:
    """``u1 = gain X + offset_gain psi1`` with ``gain = -E1^{-1} B1^T phi1``."""

    gain: MatrixPath
    offset_gain: MatrixPath

    def control(self, k: int, X: np.ndarray, psi1: np.ndarray) -> np.ndarray:
        """Evaluate at grid index ``k``; ``X`` and ``psi1`` may carry trailing columns."""
        return self.gain[k] @ X + self.offset_gain[k] @ psi1


def follower_riccati_problem(spec: ProblemSpec, derived: DerivedCoefficients | None = None) -> OdeProblem:
    derived = derived or derived_coefficients(spec)
    A, C, D1, S1 = spec.dynamics.A, spec.dynamics.C, spec.costs.D1, derived.S1

    def rhs(t, phi):
        a, c = A(t), C(t)
        return -(D1(t) + phi @ a + a.T @ phi + c.T @ phi @ c - phi @ S1(t) @ phi)

    return OdeProblem(rhs, spec.costs.G1, "backward", symmetrize=True, name="follower Riccati")


def solve_follower_riccati(spec: ProblemSpec) -> FollowerRiccati:
    problem = follower_riccati_problem(spec)
    try:
        phi1 = integrate(problem, spec.grid)
    except BlowupError as exc:
        raise BlowupError(
            f"follower Riccati non-solvable; H1-type coercivity suspect ({exc})",
            "follower Riccati", exc.time,
        ) from exc
    return FollowerRiccati(phi1, problem)


def follower_feedback(spec: ProblemSpec, phi1: FollowerRiccati) -> FollowerFeedback:
    derived = derived_coefficients(spec)
    EB = derived.E1_inv.values @ np.swapaxes(spec.dynamics.B1.values, 1, 2)
    return FollowerFeedback(
        gain=MatrixPath(spec.grid, -EB @ phi1.phi1.values),
        offset_gain=MatrixPath(spec.grid, -EB),
    )


def psi1_problem(spec: ProblemSpec, phi1: FollowerRiccati, u2: MatrixPath) -> OdeProblem:
    derived = derived_coefficients(spec)
    A, B2, S1, phi = spec.dynamics.A, spec.dynamics.B2, derived.S1, phi1.phi1

    def rhs(t, psi):
        p = phi(t)
        return -((A(t).T - p @ S1(t)) @ psi + p @ B2(t) @ u2(t))

    return OdeProblem(rhs, np.zeros((spec.n, u2.cols)), "backward", name="follower psi1")


def solve_psi1(spec: ProblemSpec, phi1: FollowerRiccati, u2: MatrixPath) -> MatrixPath:
    """Follower adjoint offset for a deterministic open-loop leader control.

    ``u2`` is an ``m x k`` path; each column is treated as a separate control
    and the result is the matching ``n x k`` path (the equation is linear).
    """
    if u2.rows != spec.m or u2.grid != spec.grid:
        raise ValueError(f"u2 must be an m x k path on the spec grid, got {u2.shape}")
    return integrate(psi1_problem(spec, phi1, u2), spec.grid)


@dataclass(frozen=True, eq=False)
class FollowerEnsemble:
    """Simulated paths for a deterministic leader control.

    ``X`` has shape (paths, N+1, n), ``u1`` (paths, N+1, m) and ``u2`` (N+1, m).
    """

    X: np.ndarray
    u1: np.ndarray
    u2: np.ndarray


@dataclass(frozen=True)
class CompletionOfSquares:
    J1: tuple[float, float]
    base: float
    cross: float
    psi_term: float
    penalty: tuple[float, float]
    identity_gap: tuple[float, float]


def completion_of_squares_J1(
    spec: ProblemSpec, phi1: FollowerRiccati, psi1: MatrixPath, ensemble: FollowerEnsemble
) -> CompletionOfSquares:
    """Split the follower cost as ``base + cross - psi_term + penalty``.

    ``base`` and ``cross`` and ``psi_term`` are deterministic because ``psi1`` is;
    ``J1`` and ``penalty`` are sample means, returned as ``(estimate, standard error)``.
    """
    X, u1, u2 = ensemble.X, ensemble.u1, ensemble.u2
    if X.shape[0] == 0:
        raise ValueError("empty ensemble")
    grid = spec.grid
    w = grid.trapezoid_weights
    derived = derived_coefficients(spec)
    B1, B2 = spec.dynamics.B1.values, spec.dynamics.B2.values
    E1, E1_inv = spec.costs.E1.values, derived.E1_inv.values
    D1, G1, phi = spec.costs.D1.values, spec.costs.G1, phi1.phi1.values
    psi = psi1.values[:, :, 0]
    xi = spec.dynamics.xi

    base = float(xi @ (phi[0] @ xi + 2.0 * psi[0]))
    B2u2 = np.einsum("kij,kj->ki", B2, u2)
    cross = float(2.0 * w @ np.einsum("ki,ki->k", B2u2, psi))
    B1psi = np.einsum("kji,kj->ki", B1, psi)
    psi_term = float(w @ np.einsum("ki,kij,kj->k", B1psi, E1_inv, B1psi))

    running = np.einsum("pki,kij,pkj->pk", X, D1, X) + np.einsum("pki,kij,pkj->pk", u1, E1, u1)
    J1_paths = running @ w + np.einsum("pi,ij,pj->p", X[:, -1], G1, X[:, -1])
    # r = E1 u1 + B1^T (phi1 X + psi1)
    r = np.einsum("kij,pkj->pki", E1, u1) + np.einsum("kji,kjl,pkl->pki", B1, phi, X) + B1psi[None]
    penalty_paths = np.einsum("pki,kij,pkj->pk", r, E1_inv, r) @ w
    gap_paths = J1_paths - (base + cross - psi_term + penalty_paths)
    return CompletionOfSquares(
        J1=_mean_se(J1_paths), base=base, cross=cross, psi_term=psi_term,
        penalty=_mean_se(penalty_paths), identity_gap=_mean_se(gap_paths),
    )


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    if x.size < 2:
        return float(np.mean(x)), 0.0
    return float(np.mean(x)), float(np.std(x, ddof=1) / np.sqrt(x.size))
