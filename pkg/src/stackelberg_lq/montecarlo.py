"""Monte Carlo verification of the equilibrium, plus exact coercivity checks.

Paths are simulated by Euler-Maruyama on the solver grid. Each path (or each
antithetic pair) owns a Philox stream keyed by ``(seed, index)``, so estimates
do not depend on chunking or on how many worker threads run the chunks.
Standard errors are computed over independent sampling units: pair averages
when antithetic variates are on, single paths otherwise.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import scipy.linalg

from .follower import FollowerEnsemble, FollowerRiccati, solve_follower_riccati, solve_psi1
from .leader import AugmentedSystem, EquilibriumPolicy, LeaderRiccati, Psi2Solution
from .model import MatrixPath, ProblemSpec, derived_coefficients
from .odes import OdeProblem, integrate

CHUNK_UNITS = 1024
THREADS_ENV = "STACKELBERG_LQ_THREADS"


class SimulationError(FloatingPointError):
    pass


@dataclass(frozen=True)
class SimulationConfig:
    n_paths: int = 50_000
    seed: int = 0
    antithetic: bool = True
    # draw this many Brownian increments per path and aggregate them onto the
    # grid; lets runs on different grids share the same Brownian paths
    noise_steps: int | None = None
    workers: int | None = None

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("n_paths must be positive")
        if self.antithetic and self.n_paths % 2:
            raise ValueError("n_paths must be even with antithetic variates")

    @property
    def n_units(self) -> int:
        return self.n_paths // 2 if self.antithetic else self.n_paths


def worker_count(config: SimulationConfig) -> int:
    if config.workers is not None:
        return max(1, int(config.workers))
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return min(8, os.cpu_count() or 1)


def unit_normals(seed: int, index: int, size: int) -> np.ndarray:
    """Standard normals from the counter-based stream of one sampling unit."""
    key = ((int(seed) & (2**64 - 1)) << 64) | int(index)
    return np.random.Generator(np.random.Philox(key=key)).standard_normal(size)


def _increments(config: SimulationConfig, n_steps: int, dt: float, start: int, stop: int) -> np.ndarray:
    """Brownian increments of shape (paths, n_steps) for units ``start..stop-1``."""
    fine = config.noise_steps or n_steps
    if fine % n_steps:
        raise ValueError(f"noise_steps={fine} is not a multiple of n_steps={n_steps}")
    r = fine // n_steps
    z = np.stack([unit_normals(config.seed, j, fine) for j in range(start, stop)])
    dW = z.reshape(len(z), n_steps, r).sum(axis=2) * np.sqrt(dt / r)
    if config.antithetic:
        dW = np.concatenate([dW, -dW], axis=0)
    return dW


def _to_units(x: np.ndarray, config: SimulationConfig, count: int) -> np.ndarray:
    """Collapse path-level samples (first axis) into sampling-unit samples."""
    if config.antithetic:
        return 0.5 * (x[:count] + x[count:])
    return x


def _run_chunks(fn, config: SimulationConfig) -> list:
    bounds = [(i, min(i + CHUNK_UNITS, config.n_units)) for i in range(0, config.n_units, CHUNK_UNITS)]
    workers = worker_count(config)
    if workers == 1 or len(bounds) == 1:
        return [fn(a, b) for a, b in bounds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda ab: fn(*ab), bounds))


@dataclass(frozen=True)
class Estimate:
    mean: float
    se: float

    @classmethod
    def of(cls, samples: np.ndarray) -> Estimate:
        samples = np.asarray(samples, dtype=float)
        se = float(np.std(samples, ddof=1) / np.sqrt(samples.size)) if samples.size > 1 else 0.0
        return cls(float(np.mean(samples)), se)

    def z(self, target: float) -> float:
        diff = self.mean - target
        if self.se == 0.0:
            return 0.0 if diff == 0.0 else float(np.copysign(np.inf, diff))
        return diff / self.se


@dataclass
class SimulationReport:
    J1: Estimate
    J2: Estimate
    rho: list[Estimate]
    lagrangian: Estimate
    terminal_mean: np.ndarray
    terminal_cov: np.ndarray
    n_paths: int
    pass_flags: dict[str, bool] = field(default_factory=dict)
    duality_z: float | None = None

    @property
    def rho_hat(self) -> np.ndarray:
        return np.array([r.mean for r in self.rho])

    @property
    def rho_se(self) -> np.ndarray:
        return np.array([r.se for r in self.rho])


@dataclass(frozen=True, eq=False)
class _ClosedLoop:
    """Grid-sampled arrays needed to step the equilibrium state."""

    M: np.ndarray    # drift matrix of Z, (N+1, 2n, 2n)
    f: np.ndarray    # drift offset of Z, (N+1, 2n)
    Cb: np.ndarray   # (N+1, 2n, 2n)
    K1: np.ndarray
    o1: np.ndarray   # k1 lam, (N+1, m)
    K2: np.ndarray
    o2: np.ndarray


def _closed_loop(aug: AugmentedSystem, phi2: LeaderRiccati, psi2: Psi2Solution, policy: EquilibriumPolicy) -> _ClosedLoop:
    F, P2 = aug.F_bar.values, phi2.phi2.values
    lam = policy.lam
    M = aug.A_bar.values - F @ P2
    f = (aug.f_Z.values - F @ psi2.psi2.values) @ lam
    return _ClosedLoop(
        M, f, aug.C_bar.values, policy.K1.values, policy.k1.values @ lam,
        policy.K2.values, policy.k2.values @ lam,
    )


@dataclass(frozen=True, eq=False)
class _Perturbation:
    """Linear perturbation ``Xt`` with ``dXt = (Mt Xt + ft) dt + C Xt dB``.

    The control perturbations are ``du1 = Kt Xt + c1`` and ``du2 = c2``.
    """

    Mt: np.ndarray  # (N+1, n, n)
    ft: np.ndarray  # (N+1, n)
    Kt: np.ndarray  # (N+1, m, n)
    c1: np.ndarray  # (N+1, m)
    c2: np.ndarray  # (N+1, m)


class _Costs:
    """Per-path running and terminal costs on the grid, accumulated step by step."""

    def __init__(self, spec: ProblemSpec, paths: int):
        self.spec = spec
        self.w = spec.grid.trapezoid_weights
        self.D1, self.E1 = spec.costs.D1.values, spec.costs.E1.values
        self.D2, self.E2 = spec.costs.D2.values, spec.costs.E2.values
        c = spec.constraints
        self.alpha, self.beta, self.gamma = c.alpha.values, c.beta.values, c.gamma.values
        self.J1 = np.zeros(paths)
        self.J2 = np.zeros(paths)
        self.rho = np.zeros((paths, spec.l))

    def add(self, k: int, X, u1, u2):
        w = self.w[k]
        self.J1 += w * (_quad(X, self.D1[k]) + _quad(u1, self.E1[k]))
        self.J2 += w * (_quad(X, self.D2[k]) + _quad(u2, self.E2[k]))
        self.rho += w * (X @ self.alpha[k] + u1 @ self.beta[k] + u2 @ self.gamma[k])

    def finish(self, X):
        sp = self.spec
        self.J1 += _quad(X, sp.costs.G1)
        self.J2 += _quad(X, sp.costs.G2)
        self.rho += X @ sp.constraints.delta


def _quad(x: np.ndarray, S: np.ndarray) -> np.ndarray:
    return np.einsum("pi,ij,pj->p", x, S, x)


def _simulate(spec: ProblemSpec, loop: _ClosedLoop, config: SimulationConfig,
              perturbation: _Perturbation | None = None, epsilons=()):
    """Chunked simulation; returns a list of per-chunk dicts of per-path arrays."""
    grid = spec.grid
    N, dt, n = grid.n_steps, grid.dt, spec.n
    C = spec.dynamics.C.values
    Z0 = np.concatenate([spec.dynamics.xi, np.zeros(n)])

    def chunk(start: int, stop: int) -> dict:
        dW = _increments(config, N, dt, start, stop)
        P = dW.shape[0]
        Z = np.tile(Z0, (P, 1))
        base = _Costs(spec, P)
        pert = [_Costs(spec, P) for _ in epsilons]
        Xt = np.zeros((P, n)) if perturbation is not None else None
        for k in range(N + 1):
            X = Z[:, :n]
            u1 = Z @ loop.K1[k].T + loop.o1[k]
            u2 = Z @ loop.K2[k].T + loop.o2[k]
            base.add(k, X, u1, u2)
            if perturbation is not None:
                du1 = Xt @ perturbation.Kt[k].T + perturbation.c1[k]
                du2 = perturbation.c2[k]
                for eps, acc in zip(epsilons, pert):
                    acc.add(k, X + eps * Xt, u1 + eps * du1, u2 + eps * du2)
            if k == N:
                break
            dw = dW[:, k:k + 1]
            Z = Z + (Z @ loop.M[k].T + loop.f[k]) * dt + (Z @ loop.Cb[k].T) * dw
            if perturbation is not None:
                Xt = Xt + (Xt @ perturbation.Mt[k].T + perturbation.ft[k]) * dt + (Xt @ C[k].T) * dw
            if not np.all(np.isfinite(Z)):
                raise SimulationError(
                    f"non-finite state at t={grid.times[k + 1]:.4g}; the Euler step may be too large, "
                    "re-run with more time steps"
                )
        X = Z[:, :n]
        base.finish(X)
        out = {"J1": base.J1, "J2": base.J2, "rho": base.rho, "Z_T": Z}
        for i, (eps, acc) in enumerate(zip(epsilons, pert)):
            acc.finish(X + eps * Xt)
            out[f"J1_{i}"] = acc.J1
            out[f"J2_{i}"] = acc.J2
            out[f"rho_{i}"] = acc.rho
        return out

    return _run_chunks(chunk, config)


def _gather(chunks: list[dict], key: str, config: SimulationConfig) -> np.ndarray:
    """Unit-level samples for ``key``, concatenated in chunk order."""
    parts = []
    for ch in chunks:
        x = ch[key]
        parts.append(_to_units(x, config, x.shape[0] // 2 if config.antithetic else x.shape[0]))
    return np.concatenate(parts, axis=0)


def simulate_equilibrium(
    spec: ProblemSpec,
    aug: AugmentedSystem,
    phi2: LeaderRiccati,
    psi2: Psi2Solution,
    policy: EquilibriumPolicy,
    config: SimulationConfig = SimulationConfig(),
    dual_value: float | None = None,
) -> SimulationReport:
    """Simulate the closed-loop augmented state and estimate costs and constraints."""
    if policy.K1.grid != spec.grid:
        raise ValueError("policy must be assembled on the spec grid")
    loop = _closed_loop(aug, phi2, psi2, policy)
    chunks = _simulate(spec, loop, config)
    return _report(spec, policy.lam, chunks, config, dual_value)


def _report(spec, lam, chunks, config, dual_value) -> SimulationReport:
    a = spec.constraints.a
    J1 = _gather(chunks, "J1", config)
    J2 = _gather(chunks, "J2", config)
    rho = _gather(chunks, "rho", config)
    lag = J2 + 2.0 * (rho - a) @ lam
    ZT = np.concatenate([ch["Z_T"] for ch in chunks], axis=0)
    rho_est = [Estimate.of(rho[:, i]) for i in range(spec.l)]
    report = SimulationReport(
        J1=Estimate.of(J1), J2=Estimate.of(J2), rho=rho_est, lagrangian=Estimate.of(lag),
        terminal_mean=ZT.mean(axis=0), terminal_cov=np.atleast_2d(np.cov(ZT, rowvar=False)),
        n_paths=config.n_paths,
    )
    flags = {}
    lp = spec.constraints.l_prime
    for i, est in enumerate(rho_est):
        if i < lp:
            active = lam[i] > 0
            flags[f"constraint_{i}"] = abs(est.z(a[i])) <= 3.0 if active else est.mean <= a[i] + 3.0 * est.se
        else:
            flags[f"constraint_{i}"] = abs(est.z(a[i])) <= 3.0
    if dual_value is not None:
        report.duality_z = report.J2.z(dual_value)
        flags["strong_duality"] = abs(report.duality_z) <= 3.0
    report.pass_flags = flags
    return report


@dataclass
class DeviationTable:
    epsilons: np.ndarray
    increments: list[Estimate]

    @property
    def means(self) -> np.ndarray:
        return np.array([e.mean for e in self.increments])

    @property
    def ses(self) -> np.ndarray:
        return np.array([e.se for e in self.increments])

    def ratio(self, i: int = 1, j: int = 0) -> float:
        return self.means[i] / self.means[j]


def _as_direction(spec: ProblemSpec, v) -> np.ndarray:
    """Grid samples (N+1, m) of a deterministic control direction."""
    if isinstance(v, MatrixPath):
        return v.values[:, :, 0]
    v = np.asarray(v, dtype=float)
    if v.ndim <= 1:
        return np.broadcast_to(v.reshape(1, -1), (spec.grid.n_steps + 1, spec.m)).copy()
    return v


def deviation_test_follower(
    spec: ProblemSpec,
    aug: AugmentedSystem,
    phi2: LeaderRiccati,
    psi2: Psi2Solution,
    policy: EquilibriumPolicy,
    v,
    epsilons=(0.1, 0.2),
    config: SimulationConfig = SimulationConfig(),
) -> DeviationTable:
    """Increment of the follower cost when ``u1`` is shifted by ``eps v``.

    The leader's control process is kept exactly as in the baseline run.
    """
    vv = _as_direction(spec, v)
    N1, n, m = spec.grid.n_steps + 1, spec.n, spec.m
    B1 = spec.dynamics.B1.values
    pert = _Perturbation(
        Mt=spec.dynamics.A.values, ft=np.einsum("kij,kj->ki", B1, vv),
        Kt=np.zeros((N1, m, n)), c1=vv, c2=np.zeros((N1, m)),
    )
    # Kt = 0 and c2 = 0: the leader control stays the baseline process
    loop = _closed_loop(aug, phi2, psi2, policy)
    chunks = _simulate(spec, loop, config, pert, tuple(epsilons))
    base = _gather(chunks, "J1", config)
    incs = [Estimate.of(_gather(chunks, f"J1_{i}", config) - base) for i in range(len(epsilons))]
    return DeviationTable(np.asarray(epsilons, dtype=float), incs)


def deviation_test_leader(
    spec: ProblemSpec,
    phi1: FollowerRiccati,
    aug: AugmentedSystem,
    phi2: LeaderRiccati,
    psi2: Psi2Solution,
    policy: EquilibriumPolicy,
    v,
    epsilons=(0.1, 0.2),
    config: SimulationConfig = SimulationConfig(),
) -> DeviationTable:
    """Increment of the leader's Lagrangian when ``u2`` is shifted by ``eps v``.

    The follower re-optimizes: its adjoint offset picks up the response to
    ``v`` and its feedback acts on the perturbed state.
    """
    vv = _as_direction(spec, v)
    grid = spec.grid
    d = derived_coefficients(spec)
    B1, B2 = spec.dynamics.B1.values, spec.dynamics.B2.values
    phi = phi1.phi1.values
    psi_bar = solve_psi1(spec, phi1, MatrixPath(grid, vv[:, :, None])).values[:, :, 0]
    EB = d.E1_inv.values @ np.swapaxes(B1, 1, 2)
    pert = _Perturbation(
        Mt=spec.dynamics.A.values - d.S1.values @ phi,
        ft=np.einsum("kij,kj->ki", -d.S1.values, psi_bar) + np.einsum("kij,kj->ki", B2, vv),
        Kt=-EB @ phi, c1=-np.einsum("kij,kj->ki", EB, psi_bar), c2=vv,
    )
    loop = _closed_loop(aug, phi2, psi2, policy)
    chunks = _simulate(spec, loop, config, pert, tuple(epsilons))
    lam, a = policy.lam, spec.constraints.a

    def lagr(sfx):
        J2 = _gather(chunks, f"J2{sfx}", config)
        rho = _gather(chunks, f"rho{sfx}", config)
        return J2 + 2.0 * (rho - a) @ lam

    base = lagr("")
    incs = [Estimate.of(lagr(f"_{i}") - base) for i in range(len(epsilons))]
    return DeviationTable(np.asarray(epsilons, dtype=float), incs)


def lagrangian_samples(
    spec: ProblemSpec, aug: AugmentedSystem, phi2: LeaderRiccati, psi2: Psi2Solution,
    policy: EquilibriumPolicy, lam, config: SimulationConfig,
) -> np.ndarray:
    """Unit-level samples of ``J2 + 2 <rho - a, lam>`` under the policy at ``lam``."""
    pol = policy.with_lambda(lam)
    chunks = _simulate(spec, _closed_loop(aug, phi2, psi2, pol), config)
    J2 = _gather(chunks, "J2", config)
    rho = _gather(chunks, "rho", config)
    return J2 + 2.0 * (rho - spec.constraints.a) @ pol.lam


def simulate_follower_ensemble(
    spec: ProblemSpec,
    phi1: FollowerRiccati,
    psi1: MatrixPath,
    u2: MatrixPath,
    config: SimulationConfig,
    u1_shift=None,
) -> FollowerEnsemble:
    """Full paths of ``X`` under ``u1 = -E1^{-1}B1^T(phi1 X + psi1) + shift`` and a deterministic ``u2``.

    Keeps every path in memory, so it is meant for a few thousand paths.
    """
    grid = spec.grid
    N, dt = grid.n_steps, grid.dt
    d = derived_coefficients(spec)
    A, C = spec.dynamics.A.values, spec.dynamics.C.values
    B1, B2 = spec.dynamics.B1.values, spec.dynamics.B2.values
    EB = d.E1_inv.values @ np.swapaxes(B1, 1, 2)
    gain = -EB @ phi1.phi1.values
    shift = np.zeros((N + 1, spec.m)) if u1_shift is None else _as_direction(spec, u1_shift)
    off = -np.einsum("kij,kj->ki", EB, psi1.values[:, :, 0]) + shift
    u2v = u2.values[:, :, 0]
    B2u2 = np.einsum("kij,kj->ki", B2, u2v)

    def chunk(start, stop):
        dW = _increments(config, N, dt, start, stop)
        P = dW.shape[0]
        X = np.empty((P, N + 1, spec.n))
        U = np.empty((P, N + 1, spec.m))
        x = np.tile(spec.dynamics.xi, (P, 1))
        for k in range(N + 1):
            u = x @ gain[k].T + off[k]
            X[:, k], U[:, k] = x, u
            if k < N:
                x = x + (x @ A[k].T + u @ B1[k].T + B2u2[k]) * dt + (x @ C[k].T) * dW[:, k:k + 1]
        return {"X": X, "U": U}

    chunks = _run_chunks(chunk, config)
    return FollowerEnsemble(
        np.concatenate([c["X"] for c in chunks]), np.concatenate([c["U"] for c in chunks]), u2v,
    )


# ---------------------------------------------------------------------------
# coercivity on deterministic piecewise-constant directions


@dataclass
class CoercivityReport:
    which: str
    epsilon_hat: float
    basis_size: int
    verdict: Literal["verified", "failed", "inconclusive"]
    form: np.ndarray = field(repr=False)
    mass: np.ndarray = field(repr=False)
    note: str = "restricted to deterministic piecewise-constant directions"


def _block_basis(spec: ProblemSpec, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Interval-wise values (N, m, K*m) of the basis and the block index per interval."""
    N, m = spec.grid.n_steps, spec.m
    if K > N:
        raise ValueError(f"basis_size {K} exceeds the number of grid intervals {N}")
    edges = np.round(np.linspace(0, N, K + 1)).astype(int)
    block = np.searchsorted(edges, np.arange(N), side="right") - 1
    U = np.zeros((N, m, K * m))
    for c in range(m):
        U[np.arange(N), c, block * m + c] = 1.0
    return U, block


def coercivity_check(
    spec: ProblemSpec, which: Literal["H1", "H2"], basis_size: int = 16, phi1: FollowerRiccati | None = None,
) -> CoercivityReport:
    """Smallest Rayleigh quotient of the H1 or H2 cost form over a control basis.

    The form is computed exactly (up to RK4 accuracy) from first and second
    moment equations, which close because the directions are deterministic.
    """
    if basis_size < 4:
        raise ValueError("basis_size must be at least 4")
    if which not in ("H1", "H2"):
        raise ValueError("which must be 'H1' or 'H2'")
    grid = spec.grid
    N, n, m = grid.n_steps, spec.n, spec.m
    U, _ = _block_basis(spec, basis_size)
    r = U.shape[2]
    A, C = spec.dynamics.A, spec.dynamics.C
    d = derived_coefficients(spec)

    if which == "H1":
        B1 = spec.dynamics.B1
        D, E, G = spec.costs.D1.values, spec.costs.E1.values, spec.costs.G1
        M_path = A
        forcing = lambda t, k: B1(t) @ U[k]
    else:
        if phi1 is None:
            phi1 = solve_follower_riccati(spec)
        D, E, G = spec.costs.D2.values, spec.costs.E2.values, spec.costs.G2
        phi, S1, B2 = phi1.phi1, d.S1, spec.dynamics.B2
        M_path = MatrixPath(grid, A.values - S1.values @ phi.values)

        def psi_rhs(t, psi, k):
            p = phi(t)
            return -((A(t).T - p @ S1(t)) @ psi + p @ B2(t) @ U[k])

        psi_bar = integrate(
            OdeProblem(psi_rhs, np.zeros((n, r)), "backward", name="H2 psi_bar", interval_aware=True), grid
        )
        forcing = lambda t, k: -S1(t) @ psi_bar(t) + B2(t) @ U[k]

    # state columns: means (n, r) then second moments (n, n, r, r) flattened
    def moments_rhs(t, y, k):
        mean = y[:, :r]
        S = y[:, r:].reshape(n, n, r, r)
        a, c = M_path(t), C(t)
        f = forcing(t, k)
        dmean = a @ mean + f
        dS = (np.einsum("ij,jlpq->ilpq", a, S) + np.einsum("lj,ijpq->ilpq", a, S)
              + np.einsum("ij,jkpq,lk->ilpq", c, S, c)
              + np.einsum("ip,lq->ilpq", f, mean) + np.einsum("ip,lq->ilpq", mean, f))
        return np.concatenate([dmean, dS.reshape(n, n * r * r)], axis=1)

    y0 = np.zeros((n, r + n * r * r))
    sol = integrate(OdeProblem(moments_rhs, y0, "forward", name=f"{which} moments", interval_aware=True), grid)
    S = sol.values[:, :, r:].reshape(N + 1, n, n, r, r)

    w = grid.trapezoid_weights
    state = np.einsum("k,kij,kjipq->pq", w, D, S) + np.einsum("ij,jipq->pq", np.atleast_2d(G), S[-1])
    # controls are constant on each interval: integrate E by the interval trapezoid
    E_int = 0.5 * (E[:-1] + E[1:]) * grid.dt
    control = np.einsum("kip,kij,kjq->pq", U, E_int, U)
    mass = np.einsum("kip,kiq->pq", U, U) * grid.dt
    Q = 0.5 * ((state + control) + (state + control).T)
    eps = float(scipy.linalg.eigh(Q, mass, eigvals_only=True)[0])
    if eps > 1e-6:
        verdict = "verified"
    elif eps < -1e-6:
        verdict = "failed"
    else:
        verdict = "inconclusive"
    return CoercivityReport(which, eps, basis_size, verdict, Q, mass)
