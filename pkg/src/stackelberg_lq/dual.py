"""The Lagrangian dual of the leader's constrained problem.

The dual function is the concave quadratic ``J(lam) = c + 2 b.lam - lam.S0.lam``
maximized over ``lam_i >= 0`` on inequality rows (equality rows are free).
At the maximizer the constraint values are ``rho(lam) = b_bar - S0 lam``
with ``b_bar = b + a``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .leader import AugmentedSystem, LeaderRiccati, Psi2Solution
from .model import ProblemSpec, derived_coefficients

ENUMERATION_LIMIT = 12
PD_TOL = 1e-10
GRADIENT_TOL = 1e-10
MAX_ITER = 100_000
UNBOUNDED = 1e8


class DualUnbounded(ArithmeticError):
    pass


class NonConvergence(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class DualProblemData:
    c: float
    b: np.ndarray
    S0: np.ndarray
    a: np.ndarray
    l_prime: int

    def __post_init__(self):
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float).reshape(-1))
        object.__setattr__(self, "a", np.asarray(self.a, dtype=float).reshape(-1))
        S0 = np.atleast_2d(np.asarray(self.S0, dtype=float)).reshape(self.b.size, self.b.size)
        object.__setattr__(self, "S0", S0)
        object.__setattr__(self, "c", float(self.c))

    @property
    def l(self) -> int:
        return self.b.size

    @property
    def b_bar(self) -> np.ndarray:
        """Constraint values at ``lam = 0``."""
        return self.b + self.a

    @property
    def inequality_indices(self) -> np.ndarray:
        return np.arange(self.l_prime)

    @property
    def equality_indices(self) -> np.ndarray:
        return np.arange(self.l_prime, self.l)

    def value(self, lam) -> float:
        lam = np.asarray(lam, dtype=float).reshape(-1)
        return float(self.c + 2.0 * self.b @ lam - lam @ self.S0 @ lam)

    def gradient(self, lam) -> np.ndarray:
        lam = np.asarray(lam, dtype=float).reshape(-1)
        return 2.0 * (self.b - self.S0 @ lam)

    def with_rhs(self, a) -> DualProblemData:
        a = np.asarray(a, dtype=float).reshape(-1)
        return DualProblemData(self.c, self.b_bar - a, self.S0, a, self.l_prime)

    def project(self, lam: np.ndarray) -> np.ndarray:
        out = np.array(lam, dtype=float)
        out[: self.l_prime] = np.maximum(out[: self.l_prime], 0.0)
        return out


def dual_from_coefficients(c: float, b, S0, l_prime: int, a=None) -> DualProblemData:
    b = np.asarray(b, dtype=float).reshape(-1)
    a = np.zeros_like(b) if a is None else a
    return DualProblemData(c, b, S0, a, l_prime)


def build_dual(spec: ProblemSpec, aug: AugmentedSystem, phi2: LeaderRiccati, psi2: Psi2Solution) -> DualProblemData:
    n = spec.n
    xi = spec.dynamics.xi
    P2, Y = phi2.phi2.values, psi2.psi2.values
    c = float(xi @ P2[0, :n, :n] @ xi)
    b_bar = Y[0, :n, :].T @ xi
    d = derived_coefficients(spec)
    fZ, F = aug.f_Z.values, aug.F_bar.values
    gam = spec.constraints.gamma.values
    YtfZ = np.swapaxes(Y, 1, 2) @ fZ
    integrand = (
        YtfZ + np.swapaxes(YtfZ, 1, 2)
        - np.swapaxes(gam, 1, 2) @ d.E2_inv.values @ gam
        - np.swapaxes(Y, 1, 2) @ F @ Y
    )
    S0 = -np.einsum("k,kij->ij", spec.grid.trapezoid_weights, integrand)
    S0 = 0.5 * (S0 + S0.T)
    a = spec.constraints.a
    return DualProblemData(c, b_bar - a, S0, a, spec.constraints.l_prime)


def rho_of_lambda(data: DualProblemData, lam) -> np.ndarray:
    return data.b_bar - data.S0 @ np.asarray(lam, dtype=float).reshape(-1)


@dataclass(frozen=True)
class KKTResiduals:
    stationarity: float
    primal_feasibility: float
    complementary_slackness: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return max(self.stationarity, self.primal_feasibility, self.complementary_slackness) <= self.tolerance


@dataclass
class DualSolution:
    lambda_star: np.ndarray
    value: float
    active_set: list[int]
    rho_at_star: np.ndarray
    kkt: KKTResiduals
    unique: bool
    method: str
    warnings: list[str] = field(default_factory=list)


def kkt_residuals(data: DualProblemData, lam) -> KKTResiduals:
    lam = np.asarray(lam, dtype=float).reshape(-1)
    g = data.b - data.S0 @ lam  # = rho(lam) - a
    ineq, eq = data.inequality_indices, data.equality_indices
    stat = np.abs(data.project(lam + g) - lam)
    primal = np.concatenate([np.maximum(g[ineq], 0.0), np.abs(g[eq]), np.maximum(-lam[ineq], 0.0)])
    comp = np.abs(lam[ineq] * g[ineq])
    norm_S0 = float(np.linalg.norm(data.S0, 2)) if data.l else 0.0
    tol = 1e-8 * (1.0 + float(np.linalg.norm(data.b)) + norm_S0 * float(np.linalg.norm(lam)))
    mx = lambda x: float(np.max(x, initial=0.0))
    return KKTResiduals(mx(stat), mx(primal), mx(comp), tol)


def _curvature(data: DualProblemData) -> tuple[np.ndarray, float]:
    evals = np.linalg.eigvalsh(data.S0)
    scale = max(float(np.trace(data.S0)) / data.l, 0.0)
    return evals, scale


def solve_dual(data: DualProblemData, start=None) -> DualSolution:
    l = data.l
    warnings: list[str] = []
    if l == 0:
        lam = np.zeros(0)
        return _finish(data, lam, True, "trivial", warnings)
    evals, scale = _curvature(data)
    pd = bool(evals[0] > PD_TOL * scale) and scale > 0
    if pd and l <= ENUMERATION_LIMIT:
        lam = _enumerate(data)
        return _finish(data, lam, True, "active-set enumeration", warnings)
    if evals[0] < -PD_TOL * max(scale, 1.0):
        warnings.append("dual unbounded risk: S0 has a negative eigenvalue")
    elif not pd:
        warnings.append("S0 is singular; the dual maximizer may not be unique")
    lam = _projected_gradient(data, evals, start)
    return _finish(data, lam, pd, "projected gradient", warnings)


def _finish(data, lam, unique, method, warnings) -> DualSolution:
    ineq = data.inequality_indices
    active = [int(i) for i in ineq if lam[i] == 0.0]
    return DualSolution(
        lambda_star=lam, value=data.value(lam), active_set=active, rho_at_star=rho_of_lambda(data, lam),
        kkt=kkt_residuals(data, lam), unique=unique, method=method, warnings=warnings,
    )


def _enumerate(data: DualProblemData) -> np.ndarray:
    """Exact maximizer for positive definite ``S0`` by trying every active set."""
    l, ineq = data.l, data.inequality_indices
    S0, b = data.S0, data.b
    best, best_val = None, -np.inf
    tol = 1e-12 * (1.0 + np.abs(b).max() + np.abs(S0).max())
    for r in range(len(ineq) + 1):
        for active in itertools.combinations(ineq.tolist(), r):
            free = np.setdiff1d(np.arange(l), active)
            lam = np.zeros(l)
            if free.size:
                lam[free] = np.linalg.solve(S0[np.ix_(free, free)], b[free])
            g = b - S0 @ lam
            if np.any(lam[np.setdiff1d(ineq, active)] < -tol):
                continue
            if len(active) and np.any(g[list(active)] > tol):
                continue
            val = data.value(lam)
            if val > best_val:
                best, best_val = lam, val
    if best is None:  # cannot happen for positive definite S0
        raise NonConvergence("active-set enumeration found no KKT point")
    best = best.copy()
    best[ineq] = np.maximum(best[ineq], 0.0)
    return best


def _projected_gradient(data: DualProblemData, evals: np.ndarray, start=None) -> np.ndarray:
    lam = data.project(np.zeros(data.l) if start is None else np.asarray(start, dtype=float))
    top = float(np.max(np.abs(evals)))
    step = 0.5 / top if top > 0 else 1.0
    for _ in range(MAX_ITER):
        g = data.gradient(lam)
        new = data.project(lam + step * g)
        if np.max(np.abs(new - lam)) <= GRADIENT_TOL * max(step, 1.0):
            return new
        lam = new
        if abs(data.value(lam)) > UNBOUNDED or np.max(np.abs(lam)) > UNBOUNDED:
            raise DualUnbounded("dual value exceeded 1e8; solvability assumptions appear to fail")
    raise NonConvergence(f"projected gradient did not converge in {MAX_ITER} iterations")


@dataclass(frozen=True)
class GradientCheck:
    quadratic_error: float
    pipeline_z: np.ndarray | None = None


def dual_gradient_check(
    data: DualProblemData,
    lam,
    h: float,
    lagrangian_samples: Callable[[np.ndarray], np.ndarray] | None = None,
) -> GradientCheck:
    """Compare ``2 (b - S0 lam)`` with central differences.

    ``lagrangian_samples(lam)`` may return per-sample Lagrangian values drawn
    with common random numbers; the pipeline z-score is then computed from
    the paired finite differences.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    lam = np.asarray(lam, dtype=float).reshape(-1)
    grad = data.gradient(lam)
    err = 0.0
    fd = np.zeros(data.l)
    for i in range(data.l):
        e = np.zeros(data.l)
        e[i] = h
        fd[i] = (data.value(lam + e) - data.value(lam - e)) / (2 * h)
    if data.l:
        err = float(np.max(np.abs(fd - grad)))
    z = None
    if lagrangian_samples is not None:
        z = np.zeros(data.l)
        for i in range(data.l):
            e = np.zeros(data.l)
            e[i] = h
            diff = (lagrangian_samples(lam + e) - lagrangian_samples(lam - e)) / (2 * h)
            se = np.std(diff, ddof=1) / np.sqrt(diff.size)
            z[i] = (np.mean(diff) - grad[i]) / se if se > 0 else (0.0 if np.mean(diff) == grad[i] else np.inf)
    return GradientCheck(err, z)
