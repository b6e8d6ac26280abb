"""Adjoint equations: Lyapunov ODE, two first-adjoint solvers, duality."""

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from seeopt.adjoint import (IllConditionedBasisError, UnsupportedRegimeError,
                            poly_features, solve_first_adjoint_affine,
                            solve_first_adjoint_regression,
                            solve_lyapunov, solve_second_adjoint,
                            verify_relaxed_transposition,
                            verify_transposition)
from seeopt.forward import GridControl, HeatOptimalControl, solve_state
from seeopt.noise import make_brownian
from seeopt.problems import heat_example, lq_example, nonlinear_toy


def _heat_setup(n=4, T=1.0, n_paths=256, M=256, seed=3):
    prob, oracle = heat_example(n, 1.0 / np.arange(1.0, n + 1) ** 2, T)
    x0 = np.concatenate([oracle.a_coeffs, np.zeros(n)])
    grid = make_brownian(seed=seed, n_paths=n_paths, M=M, T=T)
    ctrl = HeatOptimalControl(oracle)
    res = solve_state(prob, ctrl, grid, x0, store="full", store_controls=True)
    return prob, oracle, grid, ctrl, res


def _lq_setup(n=3, n_paths=256, M=256, seed=4, T=1.0):
    rng = np.random.default_rng(17)
    B1 = 0.3 * rng.standard_normal((n, n))
    B2 = 0.3 * rng.standard_normal((n, n))
    R = np.eye(n)
    prob = lq_example(B1, B2, np.eye(n), None, R, None, np.eye(n),
                      -np.arange(1.0, n + 1), n_modes=n, G=0.5 * np.eye(n))
    grid = make_brownian(seed=seed, n_paths=n_paths, M=M, T=T)
    ctrl = GridControl(0.3 * rng.standard_normal((M, n)))
    res = solve_state(prob, ctrl, grid, np.ones(n), store="full",
                      store_controls=True)
    return prob, grid, ctrl, res


# ---------------------------------------------------------------------------
# Lyapunov / second-adjoint ODE solver against an independent integrator


def test_lyapunov_scalar_closed_form():
    # d = 1, J = K = F = 0: P(t) = P_T e^{2 lam (T - t)}
    times = np.linspace(0.0, 1.0, 65)
    P = solve_lyapunov(np.array([-2.0]), None, None, None,
                       np.array([[3.0]]), times)
    exact = 3.0 * np.exp(2.0 * (-2.0) * (1.0 - times))
    np.testing.assert_allclose(P[:, 0, 0], exact, rtol=1e-10)


def test_lyapunov_constant_matrix_vs_solve_ivp():
    rng = np.random.default_rng(5)
    d = 3
    lam = -np.arange(1.0, d + 1)
    J = 0.4 * rng.standard_normal((d, d))
    K = 0.4 * rng.standard_normal((d, d))
    F = np.eye(d)
    P_T = np.diag([1.0, 0.0, -1.0]).astype(float)
    times = np.linspace(0.0, 1.0, 129)
    P = solve_lyapunov(lam, J, K, F, P_T, times)
    Aef = np.diag(lam) + J

    def rhs(t, y):
        M = y.reshape(d, d)
        dM = -Aef.T @ M - M @ Aef - K.T @ M @ K + F
        return dM.ravel()

    sol = solve_ivp(rhs, [1.0, 0.0], P_T.ravel(), t_eval=times[::-1],
                    rtol=1e-10, atol=1e-12)
    ref = sol.y[:, ::-1].T.reshape(-1, d, d)
    np.testing.assert_allclose(P, ref, rtol=1e-5, atol=1e-8)


def test_lyapunov_time_dependent_vs_solve_ivp():
    d = 2
    lam = np.array([-1.0, -2.0])

    def J(t):
        return np.array([[0.0, np.sin(t)], [0.1 * t, 0.0]])

    def F(t):
        return np.cos(t) * np.eye(d)

    P_T = np.eye(d)
    times = np.linspace(0.0, 1.0, 257)
    P = solve_lyapunov(lam, J, None, F, P_T, times)

    def rhs(t, y):
        M = y.reshape(d, d)
        Aef = np.diag(lam) + J(t)
        dM = -Aef.T @ M - M @ Aef + F(t)
        return dM.ravel()

    sol = solve_ivp(rhs, [1.0, 0.0], P_T.ravel(), t_eval=times[::-1],
                    rtol=1e-10, atol=1e-12)
    ref = sol.y[:, ::-1].T.reshape(-1, d, d)
    # midpoint coefficient freezing is second order in the step size
    np.testing.assert_allclose(P, ref, rtol=1e-3, atol=5e-6)


def test_lyapunov_output_is_symmetric():
    _, grid, *_ = _lq_setup(M=32, n_paths=4)
    prob, grid, ctrl, res = _lq_setup(M=32, n_paths=4)
    sec = solve_second_adjoint(prob, grid.times)
    np.testing.assert_allclose(sec.P, np.swapaxes(sec.P, 1, 2), atol=1e-12)


def test_lyapunov_rejects_nonuniform_grid():
    with pytest.raises(ValueError):
        solve_lyapunov(np.array([-1.0]), None, None, None, np.array([[1.0]]),
                       np.array([0.0, 0.1, 0.5]))


def test_second_adjoint_heat_riccati_closed_form():
    prob, oracle, grid, _, _ = _heat_setup(n=4, M=512)
    sec = solve_second_adjoint(prob, grid.times)
    for mode in range(1, 5):
        got = sec.P[:, mode - 1, mode - 1]
        exact = oracle.riccati_p11(grid.times, mode)
        rel = np.max(np.abs(got - exact)) / np.max(np.abs(exact))
        assert rel < 1e-6, (mode, rel)
        assert np.all(got < 0)


def test_second_adjoint_refuses_nonaffine():
    toy = nonlinear_toy(3)
    with pytest.raises(UnsupportedRegimeError):
        solve_second_adjoint(toy, np.linspace(0.0, 1.0, 9))


# ---------------------------------------------------------------------------
# first adjoint: both solvers


def test_heat_adjoint_near_zero_both_solvers():
    prob, _, grid, ctrl, res = _heat_setup(n=4, M=512, n_paths=512)
    floor = np.sqrt(np.mean(res.X[:, -1, :4] ** 2)) + grid.dt
    for solver in (solve_first_adjoint_affine, solve_first_adjoint_regression):
        adj = solver(prob, grid, ctrl, res.X, res.U)
        assert adj.sup_rms_p() <= 10 * floor, solver.__name__
        assert adj.sup_rms_q() <= 10 * floor, solver.__name__


def test_lq_solvers_agree():
    prob, grid, ctrl, res = _lq_setup(n=3, n_paths=2048, M=256)
    aff = solve_first_adjoint_affine(prob, grid, ctrl, res.X, res.U)
    reg = solve_first_adjoint_regression(prob, grid, ctrl, res.X, res.U)
    # compare mean p at a few nodes within combined Monte Carlo error + O(h)
    for k in (0, 64, 128, 192):
        pa = np.mean(aff.p[:, k], axis=0)
        pr = np.mean(reg.p[:, k], axis=0)
        sea = np.std(aff.p[:, k], axis=0, ddof=1) / np.sqrt(grid.n_paths)
        ser = np.std(reg.p[:, k], axis=0, ddof=1) / np.sqrt(grid.n_paths)
        tol = 3.0 * (sea + ser) + 10.0 * grid.dt
        assert np.all(np.abs(pa - pr) <= tol), k


def test_affine_adjoint_scalar_lq_oracle():
    # d = m = 1 exact comparison: p = -(pi x + r) with pi, r from solve_ivp
    n = 1
    lam = np.array([-1.0])
    b1, b2, c1, r_cost, n_cost, g_cost = 0.3, 0.4, 1.0, 1.0, 1.0, 0.7
    prob = lq_example(np.array([[b1]]), np.array([[b2]]), np.array([[c1]]),
                      None, np.array([[r_cost]]), None, np.array([[n_cost]]),
                      lam, n_modes=1, G=np.array([[g_cost]]))
    M = 512
    grid = make_brownian(seed=9, n_paths=512, M=M, T=1.0)
    uval = 0.5
    ctrl = GridControl(np.full((M, 1), uval))
    res = solve_state(prob, ctrl, grid, np.array([1.0]), store="full",
                      store_controls=True)
    adj = solve_first_adjoint_affine(prob, grid, ctrl, res.X, res.U)
    aef = lam[0] + b1

    def rhs(t, y):
        pi, rr = y
        dpi = -2.0 * aef * pi - b2 ** 2 * pi - r_cost
        drr = -aef * rr - pi * c1 * uval
        return [dpi, drr]

    sol = solve_ivp(rhs, [1.0, 0.0], [g_cost, 0.0],
                    t_eval=grid.times[::-1], rtol=1e-10, atol=1e-12)
    pi = sol.y[0, ::-1]
    rr = sol.y[1, ::-1]
    for k in (0, 128, 256, 384, 511):
        expect = -(pi[k] * res.X[:, k, 0] + rr[k])
        err = np.max(np.abs(adj.p[:, k, 0] - expect))
        assert err < 5e-3, (k, err)
        # q = -pi b = -pi (b2 x + 0)
        qex = -pi[k] * b2 * res.X[:, k, 0]
        assert np.max(np.abs(adj.q[:, k, 0] - qex)) < 5e-3, k


def test_affine_adjoint_refuses_nonaffine():
    toy = nonlinear_toy(3)
    grid = make_brownian(seed=1, n_paths=8, M=8, T=0.5)
    ctrl = GridControl(np.zeros((8, 3)))
    res = solve_state(toy, ctrl, grid, np.ones(3), store="full",
                      store_controls=True)
    with pytest.raises(UnsupportedRegimeError):
        solve_first_adjoint_affine(toy, grid, ctrl, res.X, res.U)


# ---------------------------------------------------------------------------
# regression machinery


def test_poly_features_contents():
    X = np.array([[1.0, 2.0]])
    F = poly_features(X, degree=2)
    # [1, x1, x2, x1^2, x1 x2, x2^2]
    np.testing.assert_allclose(F, [[1.0, 1.0, 2.0, 1.0, 2.0, 4.0]])


def test_regression_too_few_paths_raises():
    prob, grid, ctrl, res = _lq_setup(n=3, n_paths=4, M=8)
    with pytest.raises(IllConditionedBasisError):
        solve_first_adjoint_regression(prob, grid, ctrl, res.X, res.U)


def test_regression_handles_degenerate_state_component():
    # heat second component is identically zero: rank-deficient quadratic
    # basis must be handled by rank reduction, not an error
    prob, _, grid, ctrl, res = _heat_setup(n=2, M=64, n_paths=256)
    adj = solve_first_adjoint_regression(prob, grid, ctrl, res.X, res.U)
    assert np.all(np.isfinite(adj.p)) and np.all(np.isfinite(adj.q))


# ---------------------------------------------------------------------------
# duality identities


def test_transposition_identity_heat_and_lq():
    prob, _, grid, ctrl, res = _heat_setup(n=4, M=256, n_paths=512)
    adj = solve_first_adjoint_affine(prob, grid, ctrl, res.X, res.U)
    rep = verify_transposition(prob, grid, adj, res.X, res.U, n_tuples=8,
                               seed=21)
    assert rep["all_passed"], rep

    prob, grid, ctrl, res = _lq_setup(n=3, n_paths=512, M=256)
    adj = solve_first_adjoint_affine(prob, grid, ctrl, res.X, res.U)
    rep = verify_transposition(prob, grid, adj, res.X, res.U, n_tuples=8,
                               seed=22)
    assert rep["all_passed"], rep


def test_relaxed_transposition_identity():
    prob, grid, ctrl, res = _lq_setup(n=3, n_paths=512, M=256)
    sec = solve_second_adjoint(prob, grid.times)
    rep = verify_relaxed_transposition(prob, grid, sec, n_tuples=8, seed=23)
    assert rep["all_passed"], rep


def test_transposition_detects_wrong_adjoint():
    # negative control: corrupt p and the identity must fail
    prob, grid, ctrl, res = _lq_setup(n=3, n_paths=512, M=256)
    adj = solve_first_adjoint_affine(prob, grid, ctrl, res.X, res.U)
    adj.p = adj.p + 1.0
    rep = verify_transposition(prob, grid, adj, res.X, res.U, n_tuples=8,
                               seed=24)
    assert not rep["all_passed"]
