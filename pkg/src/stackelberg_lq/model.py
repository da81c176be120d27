"""Problem description for LQ stochastic Stackelberg games with affine constraints.

Every coefficient lives on a uniform :class:`TimeGrid` as a :class:`MatrixPath`
(one matrix per grid point, piecewise-linear in between). Coefficients are
deterministic functions of time; the single scalar Brownian motion enters the
state equation through ``C(t) X(t) dB(t)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable

import numpy as np

SYMMETRY_TOL = 1e-12
CONDITION_LIMIT = 1e12


class InvalidSpecError(ValueError):
    """Raised when a downstream operation is handed a spec that fails validation."""


class SingularMatrixError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = s + k*dt`` on ``[s, T]`` with the last point pinned to ``T``."""

    s: float
    T: float
    n_steps: int

    def __post_init__(self):
        if not self.T > self.s:
            raise ValueError(f"need T > s, got s={self.s}, T={self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 2:
            raise ValueError(f"n_steps must be an integer >= 2, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return (self.T - self.s) / self.n_steps

    @cached_property
    def times(self) -> np.ndarray:
        t = self.s + self.dt * np.arange(self.n_steps + 1)
        t[-1] = self.T
        t.setflags(write=False)
        return t

    @cached_property
    def trapezoid_weights(self) -> np.ndarray:
        w = np.full(self.n_steps + 1, self.dt)
        w[0] = w[-1] = 0.5 * self.dt
        w.setflags(write=False)
        return w

    def locate(self, t: float) -> tuple[int, float]:
        """Return ``(k, w)`` with ``t = (1-w) t_k + w t_{k+1}`` and ``0 <= k < n_steps``."""
        span = self.T - self.s
        if t < self.s - 1e-12 * span or t > self.T + 1e-12 * span:
            raise ValueError(f"time {t} outside grid [{self.s}, {self.T}]")
        x = (t - self.s) / self.dt
        k = min(max(int(np.floor(x)), 0), self.n_steps - 1)
        w = min(max(x - k, 0.0), 1.0)
        return k, w


@dataclass(frozen=True, eq=False)
class MatrixPath:
    """Matrix-valued trajectory sampled on a grid.

    Off-grid evaluation uses cubic Lagrange interpolation on the four nearest
    samples, so RK4 stages that read another solved path keep fourth order.
    """

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 3:
            raise ValueError(f"MatrixPath values must be 3-D (points, rows, cols), got shape {v.shape}")
        if v.shape[0] != self.grid.n_steps + 1:
            raise ValueError(
                f"MatrixPath needs {self.grid.n_steps + 1} samples, got {v.shape[0]}"
            )
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, grid: TimeGrid, matrix) -> MatrixPath:
        m = np.atleast_2d(np.asarray(matrix, dtype=float))
        return cls(grid, np.broadcast_to(m, (grid.n_steps + 1,) + m.shape))

    @classmethod
    def zeros(cls, grid: TimeGrid, rows: int, cols: int) -> MatrixPath:
        return cls(grid, np.zeros((grid.n_steps + 1, rows, cols)))

    @classmethod
    def from_function(cls, grid: TimeGrid, fn: Callable[[float], object]) -> MatrixPath:
        return cls(grid, np.stack([np.atleast_2d(np.asarray(fn(t), dtype=float)) for t in grid.times]))

    @property
    def rows(self) -> int:
        return self.values.shape[1]

    @property
    def cols(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]

    @cached_property
    def midpoints(self) -> np.ndarray:
        """Cubic interpolant at ``(t_k + t_{k+1}) / 2`` for every step, as read by RK4 stages."""
        v = self.values
        n = self.grid.n_steps
        if n < 3:
            mid = 0.5 * (v[:-1] + v[1:])
        else:
            mid = np.empty((n,) + v.shape[1:])
            mid[1:-1] = (9.0 * (v[1:-2] + v[2:-1]) - (v[:-3] + v[3:])) / 16.0
            mid[0] = (5.0 * v[0] + 15.0 * v[1] - 5.0 * v[2] + v[3]) / 16.0
            mid[-1] = (v[-4] - 5.0 * v[-3] + 15.0 * v[-2] + 5.0 * v[-1]) / 16.0
        mid.setflags(write=False)
        return mid

    def __call__(self, t: float) -> np.ndarray:
        g = self.grid
        half = 2.0 * (float(t) - g.s) / g.dt
        r = int(half + 0.5) if half > -0.5 else -1
        if abs(half - r) < 1e-9 and 0 <= r <= 2 * g.n_steps:
            k, odd = divmod(r, 2)
            return self.midpoints[k] if odd else self.values[k]
        k, w = g.locate(t)
        if w == 0.0:
            return self.values[k]
        n = self.grid.n_steps
        if n < 3:
            return (1.0 - w) * self.values[k] + w * self.values[k + 1]
        j = min(max(k - 1, 0), n - 3)
        x = k - j + w
        c = (-(x - 1) * (x - 2) * (x - 3) / 6, x * (x - 2) * (x - 3) / 2,
             -x * (x - 1) * (x - 3) / 2, x * (x - 1) * (x - 2) / 6)
        v = self.values
        return c[0] * v[j] + c[1] * v[j + 1] + c[2] * v[j + 2] + c[3] * v[j + 3]

    def __getitem__(self, k: int) -> np.ndarray:
        return self.values[k]

    @property
    def T(self) -> MatrixPath:
        return MatrixPath(self.grid, np.swapaxes(self.values, 1, 2))

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> MatrixPath:
        """Apply a batched array function to the stacked samples."""
        return MatrixPath(self.grid, fn(self.values))


@dataclass(frozen=True, eq=False)
class Dynamics:
    """``dX = [A X + B1 u1 + B2 u2] dt + C X dB``, ``X(s) = xi``."""

    A: MatrixPath
    B1: MatrixPath
    B2: MatrixPath
    C: MatrixPath
    xi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "xi", np.asarray(self.xi, dtype=float).reshape(-1))

    @property
    def n(self) -> int:
        return self.A.rows

    @property
    def m(self) -> int:
        return self.B1.cols


@dataclass(frozen=True, eq=False)
class CostSpec:
    """Quadratic weights of the follower (index 1) and leader (index 2) costs."""

    D1: MatrixPath
    E1: MatrixPath
    G1: np.ndarray
    D2: MatrixPath
    E2: MatrixPath
    G2: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "G1", np.atleast_2d(np.asarray(self.G1, dtype=float)))
        object.__setattr__(self, "G2", np.atleast_2d(np.asarray(self.G2, dtype=float)))


@dataclass(frozen=True, eq=False)
class ConstraintSpec:
    """Affine constraints; columns ``0..l_prime-1`` are inequalities, the rest equalities.

    Column ``i`` reads ``<X, alpha_i> + <u1, beta_i> + <u2, gamma_i> + <X(T), delta_i>``
    (all in expectation, time integrals over ``[s, T]``) compared against ``a_i``.
    """

    alpha: MatrixPath
    beta: MatrixPath
    gamma: MatrixPath
    delta: np.ndarray
    a: np.ndarray
    l_prime: int

    def __post_init__(self):
        object.__setattr__(self, "a", np.asarray(self.a, dtype=float).reshape(-1))
        delta = np.asarray(self.delta, dtype=float)
        if delta.ndim == 1:
            delta = delta.reshape(-1, self.a.size) if self.a.size else delta.reshape(-1, 0)
        object.__setattr__(self, "delta", delta)

    @property
    def l(self) -> int:
        return self.a.size

    @property
    def inequality_indices(self) -> np.ndarray:
        return np.arange(self.l_prime)

    @property
    def equality_indices(self) -> np.ndarray:
        return np.arange(self.l_prime, self.l)

    @classmethod
    def empty(cls, grid: TimeGrid, n: int, m: int) -> ConstraintSpec:
        return cls(
            alpha=MatrixPath.zeros(grid, n, 0),
            beta=MatrixPath.zeros(grid, m, 0),
            gamma=MatrixPath.zeros(grid, m, 0),
            delta=np.zeros((n, 0)),
            a=np.zeros(0),
            l_prime=0,
        )


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    dynamics: Dynamics
    costs: CostSpec
    constraints: ConstraintSpec
    grid: TimeGrid

    @property
    def n(self) -> int:
        return self.dynamics.n

    @property
    def m(self) -> int:
        return self.dynamics.m

    @property
    def l(self) -> int:
        return self.constraints.l

    def with_rhs(self, a) -> ProblemSpec:
        """Same game with the constraint right-hand sides replaced by ``a``."""
        a = np.asarray(a, dtype=float).reshape(-1)
        if a.size != self.l:
            raise ValueError(f"expected {self.l} right-hand sides, got {a.size}")
        return replace(self, constraints=replace(self.constraints, a=a))


@dataclass
class ValidationReport:
    issues: list[str] = field(default_factory=list)
    condition_numbers: dict[str, float] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.issues

    def raise_if_invalid(self):
        if self.issues:
            raise InvalidSpecError("; ".join(self.issues))


def _asymmetry(values: np.ndarray) -> np.ndarray:
    """Per-sample ``||S - S^T|| / (1 + ||S||)`` for a stack of square matrices."""
    diff = np.linalg.norm(values - np.swapaxes(values, -1, -2), axis=(-2, -1))
    return diff / (1.0 + np.linalg.norm(values, axis=(-2, -1)))


def validate(spec: ProblemSpec) -> ValidationReport:
    """Collect every violated structural invariant of ``spec``; never raises."""
    report = ValidationReport()
    issues = report.issues
    grid = spec.grid
    dyn, costs, cons = spec.dynamics, spec.costs, spec.constraints
    n, m = dyn.A.rows, dyn.B1.cols

    paths = {
        "A": (dyn.A, (n, n)), "B1": (dyn.B1, (n, m)), "B2": (dyn.B2, (n, m)), "C": (dyn.C, (n, n)),
        "D1": (costs.D1, (n, n)), "E1": (costs.E1, (m, m)),
        "D2": (costs.D2, (n, n)), "E2": (costs.E2, (m, m)),
        "alpha": (cons.alpha, (n, cons.l)), "beta": (cons.beta, (m, cons.l)),
        "gamma": (cons.gamma, (m, cons.l)),
    }
    shapes_ok = True
    for name, (path, shape) in paths.items():
        if path.grid != grid:
            issues.append(f"{name} sampled on a different grid")
            shapes_ok = False
        if path.shape != shape:
            issues.append(f"{name} has shape {path.shape}, expected {shape}")
            shapes_ok = False
    for name, arr, shape in (
        ("G1", costs.G1, (n, n)), ("G2", costs.G2, (n, n)),
        ("delta", cons.delta, (n, cons.l)), ("xi", dyn.xi, (n,)),
    ):
        if arr.shape != shape:
            issues.append(f"{name} has shape {arr.shape}, expected {shape}")
            shapes_ok = False
    if dyn.A.rows != dyn.A.cols:
        issues.append("A is not square")
    if not 0 <= cons.l_prime <= cons.l:
        issues.append(f"l_prime={cons.l_prime} outside [0, l={cons.l}]")
    if not shapes_ok:
        return report

    for name in ("A", "B1", "B2", "C", "D1", "E1", "D2", "E2", "alpha", "beta", "gamma"):
        if not np.all(np.isfinite(paths[name][0].values)):
            issues.append(f"{name} has non-finite entries")
    for name in ("D1", "D2", "E1", "E2"):
        if np.max(_asymmetry(paths[name][0].values), initial=0.0) > SYMMETRY_TOL:
            issues.append(f"{name} not symmetric")
    for name, G in (("G1", costs.G1), ("G2", costs.G2)):
        if _asymmetry(G[None])[0] > SYMMETRY_TOL:
            issues.append(f"{name} not symmetric")
    for name in ("E1", "E2"):
        cond = float(np.max(np.linalg.cond(paths[name][0].values)))
        report.condition_numbers[name] = cond
        if not np.isfinite(cond) or cond > CONDITION_LIMIT:
            issues.append(f"{name} singular")
    return report


@dataclass(frozen=True, eq=False)
class DerivedCoefficients:
    """``S_i = B_i E_i^{-1} B_i^T`` together with the inverses they are built from."""

    E1_inv: MatrixPath
    E2_inv: MatrixPath
    S1: MatrixPath
    S2: MatrixPath


def _checked_inverse(path: MatrixPath, name: str) -> MatrixPath:
    cond = np.linalg.cond(path.values)
    if not np.all(np.isfinite(cond)) or np.max(cond) > CONDITION_LIMIT:
        raise SingularMatrixError(f"{name} numerically singular on the grid")
    inv = np.linalg.inv(path.values)
    return MatrixPath(path.grid, 0.5 * (inv + np.swapaxes(inv, 1, 2)))


def derived_coefficients(spec: ProblemSpec) -> DerivedCoefficients:
    E1_inv = _checked_inverse(spec.costs.E1, "E1")
    E2_inv = _checked_inverse(spec.costs.E2, "E2")
    B1, B2 = spec.dynamics.B1.values, spec.dynamics.B2.values
    S1 = B1 @ E1_inv.values @ np.swapaxes(B1, 1, 2)
    S2 = B2 @ E2_inv.values @ np.swapaxes(B2, 1, 2)
    return DerivedCoefficients(E1_inv, E2_inv, MatrixPath(spec.grid, sym(S1)), MatrixPath(spec.grid, sym(S2)))


def sym(x: np.ndarray) -> np.ndarray:
    return 0.5 * (x + np.swapaxes(x, -1, -2))
