"""Fixed-step RK4 sweeps for matrix ODEs on a :class:`TimeGrid`."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np

from .model import MatrixPath, TimeGrid

BLOWUP_NORM = 1e8

Rhs = Callable[[float, np.ndarray], np.ndarray]


class IntegrationError(RuntimeError):
    pass


class BlowupError(IntegrationError):
    """A trajectory left the ball of Frobenius radius ``BLOWUP_NORM``.

    For Riccati equations this is the numerical signature of a finite escape
    time inside ``[s, T]``.
    """

    def __init__(self, message: str, equation: str = "", time: float | None = None):
        super().__init__(message)
        self.equation = equation
        self.time = time


class NonFiniteError(IntegrationError):
    def __init__(self, message: str, equation: str = "", time: float | None = None):
        super().__init__(message)
        self.equation = equation
        self.time = time


@dataclass(frozen=True, eq=False)
class OdeProblem:
    """``dY/dt = rhs(t, Y)`` anchored at ``s`` (forward) or ``T`` (backward).

    ``symmetrize`` replaces the state by ``(Y + Y^T)/2`` after every step,
    which is how the Riccati solvers keep their iterates exactly symmetric.
    With ``interval_aware`` the right-hand side is called as ``rhs(t, Y, k)``
    where ``k`` indexes the grid interval ``[t_k, t_{k+1}]`` being stepped; this
    lets forcing terms that are constant on each interval jump at grid points.
    """

    rhs: Rhs
    anchor: np.ndarray
    direction: Literal["forward", "backward"] = "backward"
    symmetrize: bool = False
    name: str = "ode"
    interval_aware: bool = False

    def __post_init__(self):
        if self.direction not in ("forward", "backward"):
            raise ValueError(f"direction must be 'forward' or 'backward', got {self.direction!r}")
        object.__setattr__(self, "anchor", np.atleast_2d(np.asarray(self.anchor, dtype=float)))


def _check(y: np.ndarray, problem: OdeProblem, t: float):
    if not np.all(np.isfinite(y)):
        raise NonFiniteError(f"{problem.name}: non-finite value at t={t:.6g}", problem.name, t)
    if np.linalg.norm(y) > BLOWUP_NORM:
        raise BlowupError(f"{problem.name}: norm exceeded {BLOWUP_NORM:g} at t={t:.6g}", problem.name, t)


def integrate(problem: OdeProblem, grid: TimeGrid) -> MatrixPath:
    """Classical RK4 over every grid step; index ``k`` of the result holds ``Y(t_k)``."""
    times = grid.times
    n = grid.n_steps
    y = problem.anchor.copy()
    out = np.empty((n + 1,) + y.shape)
    f = problem.rhs
    if problem.direction == "forward":
        order = range(n)
        out[0] = y
        _check(y, problem, times[0])
    else:
        order = range(n, 0, -1)
        out[n] = y
        _check(y, problem, times[n])
    for k in order:
        if problem.direction == "forward":
            t0, t1, dest = times[k], times[k + 1], k + 1
        else:
            t0, t1, dest = times[k], times[k - 1], k - 1
        h = t1 - t0
        tm = t0 + 0.5 * h
        if problem.interval_aware:
            j = min(k, dest)
            f = lambda t, v, _j=j: problem.rhs(t, v, _j)
        k1 = f(t0, y)
        k2 = f(tm, y + 0.5 * h * k1)
        k3 = f(tm, y + 0.5 * h * k2)
        k4 = f(t1, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if problem.symmetrize:
            y = 0.5 * (y + y.T)
        _check(y, problem, t1)
        out[dest] = y
    if problem.direction == "backward":
        # pin the anchor exactly (it is never touched by arithmetic, but be explicit)
        out[n] = problem.anchor
    return MatrixPath(grid, out)


def residual(path: MatrixPath, problem: OdeProblem, grid: TimeGrid) -> float:
    """Max over interior points of ``|central difference - rhs| / (1 + |rhs|)``."""
    if problem.interval_aware:
        raise ValueError("residual needs a right-hand side that is continuous in time")
    v = path.values
    times = grid.times
    worst = 0.0
    for k in range(1, grid.n_steps):
        deriv = (v[k + 1] - v[k - 1]) / (times[k + 1] - times[k - 1])
        r = problem.rhs(times[k], v[k])
        worst = max(worst, float(np.linalg.norm(deriv - r) / (1.0 + np.linalg.norm(r))))
    return worst
