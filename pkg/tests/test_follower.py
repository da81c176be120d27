from dataclasses import replace

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from conftest import ORACLE_TOL, oracle_riccati_chain, random_spec
from stackelberg_lq.examples import equality_game, scalar_game
from stackelberg_lq.follower import (
    completion_of_squares_J1, follower_feedback, solve_follower_riccati, solve_psi1,
)
from stackelberg_lq.model import MatrixPath, derived_coefficients
from stackelberg_lq.montecarlo import SimulationConfig, simulate_follower_ensemble
from stackelberg_lq.odes import BlowupError


def _scalar(spec, **coeffs):
    g = spec.grid
    dyn = spec.dynamics
    costs = spec.costs
    for name, v in coeffs.items():
        path = MatrixPath.constant(g, [[v]])
        if hasattr(dyn, name):
            dyn = replace(dyn, **{name: path})
        else:
            costs = replace(costs, **{name: path})
    return replace(spec, dynamics=dyn, costs=costs)


def test_trivial_drift_keeps_terminal():
    spec = _scalar(scalar_game(n_steps=50, constraint=None), D1=0.0, C=0.0, A=0.0, B1=0.0)
    phi = solve_follower_riccati(spec).phi1.values
    assert np.all(phi == spec.costs.G1)


def test_closed_form_scalar_riccati():
    # A = C = D1 = 0, S1 = 1, G1 = 1: phi1(t) = 1 / (1 + T - t)
    spec = _scalar(scalar_game(n_steps=2000, constraint=None), A=0.0, C=0.0, D1=0.0, B1=2.0)
    assert np.allclose(derived_coefficients(spec).S1.values, 1.0)
    phi = solve_follower_riccati(spec).phi1.values[:, 0, 0]
    t = spec.grid.times
    assert np.max(np.abs(phi - 1.0 / (1.0 + 1.0 - t))) <= 1e-8


def test_example_against_oracle_and_residual():
    spec = equality_game()
    sol = solve_follower_riccati(spec)
    chain = oracle_riccati_chain(spec)
    ref = np.array([chain(t)[0] for t in spec.grid.times])
    assert np.max(np.abs(sol.phi1.values - ref)) <= 1e-6
    assert np.all(sol.phi1[-1] == spec.costs.G1)
    assert sol.residual() <= 1e-4 * (1 + np.abs(sol.phi1.values).max())
    # the closed form phi1 = 1 quoted for this example does not solve the equation
    assert abs(sol.phi1[0][0, 0] - 1.0) > 1.0


@pytest.mark.parametrize("seed", range(5))
def test_random_specs_symmetric_and_small_residual(seed):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, n=3, m=2, l=0)
    sol = solve_follower_riccati(spec)
    v = sol.phi1.values
    assert np.max(np.abs(v - np.swapaxes(v, 1, 2))) <= 1e-12
    assert np.all(sol.phi1[-1] == spec.costs.G1)
    assert sol.residual() <= 1e-4 * (1 + np.abs(v).max())


def test_blowup_reports_coercivity():
    # strongly negative running weight with a small control penalty drives phi1 to escape
    spec = _scalar(scalar_game(n_steps=2000, constraint=None), D1=-200.0, B1=5.0, A=3.0)
    with pytest.raises(BlowupError, match="H1-type coercivity"):
        solve_follower_riccati(replace(spec, costs=replace(spec.costs, G1=np.array([[-50.0]]))))


def test_feedback_gain():
    spec = equality_game(n_steps=100)
    phi1 = solve_follower_riccati(spec)
    fb = follower_feedback(spec, phi1)
    assert fb.gain.shape == (1, 1)
    assert np.allclose(fb.gain.values, -0.5 / 4.0 * phi1.phi1.values, rtol=0, atol=1e-15)
    X = np.array([[2.0]])
    psi = np.array([[0.5]])
    assert np.allclose(fb.control(0, X, psi), -(0.5 / 4.0) * (phi1.phi1[0] @ X + psi))


def test_psi1_zero_control():
    spec = equality_game(n_steps=200)
    phi1 = solve_follower_riccati(spec)
    psi = solve_psi1(spec, phi1, MatrixPath.zeros(spec.grid, 1, 1))
    assert np.all(psi.values == 0.0)


def test_psi1_unit_control_against_oracle():
    spec = equality_game()
    phi1 = solve_follower_riccati(spec)
    psi = solve_psi1(spec, phi1, MatrixPath.constant(spec.grid, [[1.0]]))
    chain = oracle_riccati_chain(spec)

    def rhs(t, y):
        p = chain(t)[0][0, 0]
        return -((1.0 - p / 16.0) * y + p * 0.5)

    ref = solve_ivp(rhs, (1.0, 0.0), [0.0], dense_output=True, **ORACLE_TOL)
    assert np.max(np.abs(psi.values[:, 0, 0] - ref.sol(spec.grid.times)[0])) <= 1e-8


def test_psi1_linearity():
    spec = random_spec(np.random.default_rng(4), n=2, m=2, l=0, n_steps=400)
    phi1 = solve_follower_riccati(spec)
    u2 = MatrixPath.from_function(spec.grid, lambda t: [[np.sin(3 * t)], [t**2 - 0.3]])
    base = solve_psi1(spec, phi1, u2).values
    scaled = solve_psi1(spec, phi1, u2.map(lambda v: -3.5 * v)).values
    assert np.max(np.abs(scaled + 3.5 * base)) <= 1e-10 * (1 + np.abs(base).max())


def test_psi1_rejects_wrong_shape():
    spec = equality_game(n_steps=50)
    phi1 = solve_follower_riccati(spec)
    with pytest.raises(ValueError):
        solve_psi1(spec, phi1, MatrixPath.zeros(spec.grid, 2, 1))


@pytest.fixture(scope="module")
def follower_setup():
    spec = equality_game(n_steps=500)
    phi1 = solve_follower_riccati(spec)
    u2 = MatrixPath.constant(spec.grid, [[1.0]])
    psi1 = solve_psi1(spec, phi1, u2)
    return spec, phi1, u2, psi1


def test_completion_of_squares_at_best_response(follower_setup):
    spec, phi1, u2, psi1 = follower_setup
    ens = simulate_follower_ensemble(spec, phi1, psi1, u2, SimulationConfig(n_paths=4000, seed=3))
    dec = completion_of_squares_J1(spec, phi1, psi1, ens)
    mean, se = dec.penalty
    assert abs(mean) <= 3 * se + 1e-12
    gap, gap_se = dec.identity_gap
    assert abs(gap) <= 3 * gap_se


def test_completion_of_squares_shifted_control(follower_setup):
    spec, phi1, u2, psi1 = follower_setup
    ens = simulate_follower_ensemble(spec, phi1, psi1, u2, SimulationConfig(n_paths=4000, seed=3), u1_shift=1.0)
    dec = completion_of_squares_J1(spec, phi1, psi1, ens)
    # residual E1 * 1 squared in the E1^{-1} metric integrates E1 = 4 over [0, 1]
    assert dec.penalty[0] == pytest.approx(4.0, abs=1e-10)
    gap, gap_se = dec.identity_gap
    assert abs(gap) <= 3 * gap_se


def test_empty_ensemble_rejected(follower_setup):
    from stackelberg_lq.follower import FollowerEnsemble
    spec, phi1, u2, psi1 = follower_setup
    N1 = spec.grid.n_steps + 1
    empty = FollowerEnsemble(np.zeros((0, N1, 1)), np.zeros((0, N1, 1)), np.zeros((N1, 1)))
    with pytest.raises(ValueError, match="empty"):
        completion_of_squares_J1(spec, phi1, psi1, empty)


def test_adjoint_terminal_relation(follower_setup):
    # p1 = -phi1 X - psi1 meets p1(T) = -G1 X(T) because psi1(T) = 0 and phi1(T) = G1
    spec, phi1, u2, psi1 = follower_setup
    ens = simulate_follower_ensemble(spec, phi1, psi1, u2, SimulationConfig(n_paths=8, seed=0))
    XT = ens.X[:, -1]
    p1T = -XT @ phi1.phi1[-1].T - psi1[-1][:, 0]
    assert np.array_equal(p1T, -XT @ spec.costs.G1.T)
