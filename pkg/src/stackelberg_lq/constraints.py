"""Affine constraints rewritten as functionals of the leader control alone.

For a deterministic leader control ``u2`` the constraint functional is affine,

    rho_i(u2) = <u2, rho_tilde_i>_{L2} - <p_bar_i(s), xi>,

so the whole constraint system is captured by the ``m x l`` path ``rho_tilde``
and the shifted right-hand sides ``a_tilde = a + p_bar(s)^T xi``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .follower import FollowerRiccati
from .model import ConstraintSpec, MatrixPath, ProblemSpec, TimeGrid, derived_coefficients
from .odes import OdeProblem, integrate

FEASIBILITY_TOL = 1e-8


class EqualitiesInconsistent(ValueError):
    pass


class NoStrictPoint(RuntimeError):
    """Equalities are solvable but no strictly feasible point was found (H4 unverified)."""


@dataclass(frozen=True, eq=False)
class ConstraintAdjoint:
    X_bar: MatrixPath
    p_bar: MatrixPath
    rho_tilde: MatrixPath
    a_tilde: np.ndarray
    offset: np.ndarray  # <p_bar(s), xi> per constraint

    def rho(self, u2: MatrixPath) -> np.ndarray:
        """Constraint functionals for a deterministic ``m x 1`` leader control."""
        return l2_inner(u2, self.rho_tilde).reshape(-1) - self.offset


def l2_inner(f: MatrixPath, g: MatrixPath) -> np.ndarray:
    """``int f^T g dt`` by the trapezoidal rule; shape (f.cols, g.cols)."""
    w = f.grid.trapezoid_weights
    return np.einsum("k,kij,kil->jl", w, f.values, g.values)


def solve_constraint_adjoint(spec: ProblemSpec, phi1: FollowerRiccati) -> ConstraintAdjoint:
    d = derived_coefficients(spec)
    g = spec.grid
    cons = spec.constraints
    A, B1, B2 = spec.dynamics.A, spec.dynamics.B1, spec.dynamics.B2
    S1, phi = d.S1, phi1.phi1
    E1b = MatrixPath(g, d.E1_inv.values @ cons.beta.values)
    alpha_bar = MatrixPath(g, cons.alpha.values - phi.values @ B1.values @ E1b.values)
    B1E1b = MatrixPath(g, B1.values @ E1b.values)

    def p_rhs(t, p):
        return -((A(t).T - phi(t) @ S1(t)) @ p - alpha_bar(t))

    p_bar = integrate(OdeProblem(p_rhs, -cons.delta, "backward", name="constraint adjoint p_bar"), g)

    def x_rhs(t, x):
        return (A(t) - S1(t) @ phi(t)) @ x - S1(t) @ p_bar(t) + B1E1b(t)

    X_bar = integrate(OdeProblem(x_rhs, np.zeros((spec.n, spec.l)), "forward", name="constraint adjoint X_bar"), g)

    B2T = np.swapaxes(B2.values, 1, 2)
    rho_tilde = cons.gamma.values - B2T @ (p_bar.values + phi.values @ X_bar.values)
    offset = p_bar[0].T @ spec.dynamics.xi
    return ConstraintAdjoint(X_bar, p_bar, MatrixPath(g, rho_tilde), cons.a + offset, offset)


@dataclass
class SlaterReport:
    independent: bool
    gram: np.ndarray
    dependent_indices: list[int] = field(default_factory=list)
    feasible_point: MatrixPath | None = None
    coefficients: np.ndarray | None = None
    strict_margins: np.ndarray | None = None
    status: str = "independence checked"


def check_independence(adj: ConstraintAdjoint, grid: TimeGrid, l_prime: int) -> SlaterReport:
    """Rank test on the Gram matrix of the equality columns of ``rho_tilde``."""
    eq = np.arange(l_prime, adj.rho_tilde.cols)
    if eq.size == 0:
        return SlaterReport(True, np.zeros((0, 0)), status="no equality constraints")
    cols = MatrixPath(grid, adj.rho_tilde.values[:, :, eq])
    gram = l2_inner(cols, cols)
    gram = 0.5 * (gram + gram.T)
    evals, evecs = np.linalg.eigh(gram)
    scale = np.trace(gram) / eq.size
    thresh = 1e-8 * scale
    independent = bool(scale > 0 and evals[0] > thresh)
    dependent: list[int] = []
    if not independent:
        null = evecs[:, evals <= thresh] if scale > 0 else np.eye(eq.size)
        involved = np.max(np.abs(null), axis=1) > 1e-6
        dependent = [int(i) for i in eq[involved]]
    return SlaterReport(independent, gram, dependent, status="independent" if independent else "dependent")


def find_slater_point(adj: ConstraintAdjoint, spec: ProblemSpec) -> SlaterReport:
    """Look for a strictly feasible deterministic leader control in ``span(rho_tilde)``.

    With ``u2 = rho_tilde c`` every constraint value is ``(G c)_i - offset_i`` where
    ``G`` is the full Gram matrix, so the search is a small linear program in ``c``.
    """
    grid, l, lp = spec.grid, spec.l, spec.constraints.l_prime
    report = check_independence(adj, grid, lp)
    G = l2_inner(adj.rho_tilde, adj.rho_tilde)
    G = 0.5 * (G + G.T)
    at = adj.a_tilde
    ineq, eq = np.arange(lp), np.arange(lp, l)
    if l == 0:
        report.coefficients = np.zeros(0)
        report.strict_margins = np.zeros(0)
        report.feasible_point = MatrixPath.zeros(grid, spec.m, 1)
        report.status = "no constraints"
        return report

    scale = 1.0 + np.abs(at).max() + np.abs(G).max()
    if eq.size:
        c_eq, *_ = np.linalg.lstsq(G[eq], at[eq], rcond=None)
        if np.abs(G[eq] @ c_eq - at[eq]).max() > FEASIBILITY_TOL * scale:
            raise EqualitiesInconsistent(
                f"equality constraints {eq.tolist()} admit no solution in span of rho_tilde"
            )

    # first try: all inequalities with margin exactly one, equalities exact
    target = at.copy()
    target[ineq] -= 1.0
    c, *_ = np.linalg.lstsq(G, target, rcond=None)
    if not _strict(G, c, at, ineq, eq, scale):
        c = _max_min_margin(G, at, ineq, eq)
    if c is None or not _strict(G, c, at, ineq, eq, scale):
        raise NoStrictPoint("H4 unverified: no strictly feasible point found in span of rho_tilde")

    report.coefficients = c
    report.strict_margins = at[ineq] - G[ineq] @ c
    report.feasible_point = MatrixPath(grid, adj.rho_tilde.values @ c.reshape(-1, 1))
    report.status = "strictly feasible point found"
    return report


def _strict(G, c, at, ineq, eq, scale) -> bool:
    if eq.size and np.abs(G[eq] @ c - at[eq]).max() > FEASIBILITY_TOL * scale:
        return False
    return bool(ineq.size == 0 or np.min(at[ineq] - G[ineq] @ c) > 0.0)


def _max_min_margin(G, at, ineq, eq) -> np.ndarray | None:
    """Maximize ``t <= 1`` subject to ``(G c)_i + t <= a_tilde_i`` on inequalities."""
    l = G.shape[0]
    cost = np.zeros(l + 1)
    cost[-1] = -1.0
    A_ub = np.hstack([G[ineq], np.ones((ineq.size, 1))]) if ineq.size else None
    b_ub = at[ineq] if ineq.size else None
    A_eq = np.hstack([G[eq], np.zeros((eq.size, 1))]) if eq.size else None
    b_eq = at[eq] if eq.size else None
    bounds = [(None, None)] * l + [(None, 1.0)]
    res = linprog(cost, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs")
    if res.status != 0:
        return None
    return res.x[:l]


@dataclass(frozen=True, eq=False)
class QuadraticConstraintWeights:
    """Weights of the quadratic functional approximated by affine rows."""

    D: MatrixPath
    E1: MatrixPath
    E2: MatrixPath
    G: np.ndarray


@dataclass(frozen=True, eq=False)
class SampledTuple:
    alpha: MatrixPath  # n x 1
    beta1: MatrixPath  # m x 1
    beta2: MatrixPath  # m x 1
    gamma: np.ndarray  # n


def theta_form(weights: QuadraticConstraintWeights, tup: SampledTuple) -> float:
    """Quadratic form of the weights evaluated on a deterministic tuple."""
    w = tup.alpha.grid.trapezoid_weights
    val = np.einsum("k,kij,kil,klj->", w, tup.alpha.values, weights.D.values, tup.alpha.values)
    val += np.einsum("k,kij,kil,klj->", w, tup.beta1.values, weights.E1.values, tup.beta1.values)
    val += np.einsum("k,kij,kil,klj->", w, tup.beta2.values, weights.E2.values, tup.beta2.values)
    G = np.atleast_2d(weights.G)
    return float(val + tup.gamma @ G @ tup.gamma)


def approximate_quadratic_constraint(
    weights: QuadraticConstraintWeights,
    a0: float,
    p: int,
    seed: int,
    n_pieces: int = 4,
) -> tuple[ConstraintSpec, list[SampledTuple]]:
    """Replace ``Theta(u2) <= a0`` by ``p`` affine inequalities along random tuples.

    Each tuple has piecewise-constant standard-normal levels on ``n_pieces``
    equal sub-intervals and is rescaled onto the level set ``Theta = a0``.
    Returns the constraint block (all inequalities, right-hand side ``a0``)
    and the scaled tuples.
    """
    if a0 <= 0:
        raise ValueError("a0 must be positive")
    grid = weights.D.grid
    n, m = weights.D.rows, weights.E1.rows
    if p == 0:
        return ConstraintSpec.empty(grid, n, m), []
    rng = np.random.default_rng(seed)
    piece = np.minimum((np.arange(grid.n_steps + 1) * n_pieces) // grid.n_steps, n_pieces - 1)
    seen: set[bytes] = set()
    tuples: list[SampledTuple] = []
    while len(tuples) < p:
        levels = rng.standard_normal((n_pieces, n + 2 * m))
        terminal = rng.standard_normal(n)
        key = levels.tobytes() + terminal.tobytes()
        if key in seen:
            continue  # U^p requires distinct tuples
        seen.add(key)
        vals = levels[piece]
        raw = SampledTuple(
            MatrixPath(grid, vals[:, :n, None]),
            MatrixPath(grid, vals[:, n:n + m, None]),
            MatrixPath(grid, vals[:, n + m:, None]),
            terminal,
        )
        theta = theta_form(weights, raw)
        if not theta > 0:
            raise ValueError(f"sampled tuple has nonpositive quadratic value {theta:.3g}")
        k = np.sqrt(a0 / theta)
        tuples.append(SampledTuple(
            MatrixPath(grid, k * raw.alpha.values), MatrixPath(grid, k * raw.beta1.values),
            MatrixPath(grid, k * raw.beta2.values), k * terminal,
        ))

    G = np.atleast_2d(weights.G)
    alpha = np.concatenate([weights.D.values @ t.alpha.values for t in tuples], axis=2)
    beta = np.concatenate([weights.E1.values @ t.beta1.values for t in tuples], axis=2)
    gamma = np.concatenate([weights.E2.values @ t.beta2.values for t in tuples], axis=2)
    delta = np.stack([G @ t.gamma for t in tuples], axis=1)
    rows = ConstraintSpec(
        alpha=MatrixPath(grid, alpha), beta=MatrixPath(grid, beta), gamma=MatrixPath(grid, gamma),
        delta=delta, a=np.full(p, float(a0)), l_prime=p,
    )
    return rows, tuples
