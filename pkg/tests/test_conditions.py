"""Second-order condition machinery: quadratic forms, checks, certificates."""

import numpy as np
import pytest

from seeopt.adjoint import (UnsupportedRegimeError, solve_first_adjoint_affine,
                            solve_second_adjoint)
from seeopt.conditions import (check_integral_necessary,
                               check_pointwise_necessary, classify_singular,
                               control_grid_norm, direct_lq_form,
                               evaluate_derivatives, first_order_gap,
                               first_variation_values, lambda_full,
                               lambda_tilde, quadratic_growth_probe,
                               sufficient_certificate, taylor_consistency)
from seeopt.forward import GridControl, HeatOptimalControl, solve_state
from seeopt.noise import make_brownian
from seeopt.problems import build_problem, heat_example

RNG = np.random.default_rng(123)


def _heat_derivs(n=4, M=256, n_paths=256, T=1.0, seed=5):
    prob, oracle = heat_example(n, 1.0 / np.arange(1.0, n + 1) ** 2, T)
    x0 = np.concatenate([oracle.a_coeffs, np.zeros(n)])
    grid = make_brownian(seed=seed, n_paths=n_paths, M=M, T=T)
    ctrl = HeatOptimalControl(oracle)
    res = solve_state(prob, ctrl, grid, x0, store="full", store_controls=True)
    sec = solve_second_adjoint(prob, grid.times)
    derivs = evaluate_derivatives(prob, grid, res.X, res.U, adjoint=None,
                                  second=sec)
    return prob, oracle, grid, ctrl, res, sec, derivs


def _lq_derivs(name="lq_certificate", n=3, M=128, n_paths=512, seed=6):
    prob, _ = build_problem(name, n_modes=n, T=1.0)
    grid = make_brownian(seed=seed, n_paths=n_paths, M=M, T=1.0)
    vals = 0.3 * RNG.standard_normal((M, prob.control_dim))
    ctrl = GridControl(vals)
    res = solve_state(prob, ctrl, grid, np.ones(prob.dim), store="full",
                      store_controls=True)
    adj = solve_first_adjoint_affine(prob, grid, ctrl, res.X, res.U)
    sec = solve_second_adjoint(prob, grid.times)
    derivs = evaluate_derivatives(prob, grid, res.X, res.U, adjoint=adj,
                                  second=sec)
    return prob, grid, ctrl, res, derivs


def _direction(grid, m, scale=1.0, rng=None):
    rng = rng or RNG
    tt = grid.times[:-1][:, None]
    vals = (rng.standard_normal((1, m)) + rng.standard_normal((1, m)) * tt
            + rng.standard_normal((1, m)) * tt ** 2) * scale
    return np.broadcast_to(vals, (grid.n_paths, grid.M, m))


# ---------------------------------------------------------------------------
# quadratic form identities


def test_lambda_tilde_quadratic_homogeneity():
    prob, grid, ctrl, res, derivs = _lq_derivs()
    dU = _direction(grid, prob.control_dim)
    a = lambda_tilde(derivs, dU).estimate
    b = lambda_tilde(derivs, 3.0 * dU).estimate
    assert b == pytest.approx(9.0 * a, rel=1e-10)


def test_lambda_tilde_polarization():
    # Lambda(u+v) + Lambda(u-v) = 2 Lambda(u) + 2 Lambda(v) on the same noise
    prob, grid, ctrl, res, derivs = _lq_derivs()
    u = _direction(grid, prob.control_dim)
    v = _direction(grid, prob.control_dim)
    lam = lambda dd: lambda_tilde(derivs, dd).estimate
    lhs = lam(u + v) + lam(u - v)
    rhs = 2.0 * lam(u) + 2.0 * lam(v)
    assert lhs == pytest.approx(rhs, rel=1e-8)


def test_lambda_tilde_matches_direct_lq_expression():
    prob, grid, ctrl, res, derivs = _lq_derivs(n_paths=1024)
    dU = _direction(grid, prob.control_dim)
    Y = first_variation_values(prob, grid, res.X, res.U, dU)
    a = lambda_tilde(derivs, dU, Y=Y)
    b = direct_lq_form(prob, grid, dU, Y)
    scale = abs(b.estimate) + 1e-12
    assert abs(a.estimate - b.estimate) / scale < 0.01 + \
        3.0 * (a.stderr + b.stderr) / scale


def test_lambda_full_requires_affine():
    prob, _ = build_problem("toy", n_modes=3, T=0.5)
    grid = make_brownian(seed=7, n_paths=16, M=16, T=0.5)
    ctrl = GridControl(np.zeros((16, 3)))
    res = solve_state(prob, ctrl, grid, np.ones(3), store="full",
                      store_controls=True)
    derivs = evaluate_derivatives(prob, grid, res.X, res.U)
    with pytest.raises(UnsupportedRegimeError):
        lambda_full(derivs, _direction(grid, 3))


# ---------------------------------------------------------------------------
# first-order gap


def test_gap_vanishes_in_own_direction():
    prob, oracle, grid, ctrl, res, sec, derivs = _heat_derivs()
    dU = np.zeros_like(res.U)
    rep = first_order_gap(derivs, dU)
    assert rep.estimate == 0.0 and rep.verdict == "satisfied"


def test_gap_zero_at_heat_optimum():
    # (p, q) = 0 and g_u = 0 certify H_u = 0, any direction gives gap 0
    prob, oracle, grid, ctrl, res, sec, derivs = _heat_derivs()
    dU = _direction(grid, prob.control_dim)
    rep = first_order_gap(derivs, dU)
    assert rep.verdict == "satisfied"
    assert abs(rep.estimate) <= 1e-12


# ---------------------------------------------------------------------------
# integral and pointwise necessary conditions at the heat optimum


def test_integral_necessary_nonpositive_at_heat_optimum():
    prob, oracle, grid, ctrl, res, sec, derivs = _heat_derivs()
    for i in range(5):
        U_other = res.U + _direction(grid, prob.control_dim, scale=0.5,
                                     rng=np.random.default_rng(40 + i))
        rep = check_integral_necessary(derivs, U_other)
        assert rep.verdict == "satisfied", (i, rep.estimate, rep.margin)


def test_pointwise_condition_equals_riccati_quadratic_form():
    prob, oracle, grid, ctrl, res, sec, derivs = _heat_derivs(M=512)
    n = oracle.n_modes
    rng = np.random.default_rng(50)
    for _ in range(5):
        tau = float(rng.uniform(0.1, 0.9))
        v = np.zeros(2 * n)
        v[:n] = rng.standard_normal(n)  # u2 stays 0: b_u delta vanishes
        rep = check_pointwise_necessary(derivs, tau, v)
        assert rep.verdict == "satisfied"
        # reduction: lhs = <delta1, P11 delta1> with delta1 = v1 - f(tau)
        k = rep.details["node"]
        P11 = sec.P[k][:n, :n]
        from seeopt.noise import brownian_paths
        W = brownian_paths(grid)[:, k]
        delta1 = v[:n][None, :] - oracle.control_u1(grid.times[k], W)
        expect = np.mean(np.einsum("pi,ij,pj->p", delta1, P11, delta1))
        assert rep.estimate == pytest.approx(expect, rel=0.01)


def test_pointwise_refuses_without_malliavin_data():
    # along a reference control with nonzero u2, b_u(v - ubar) no longer
    # vanishes (the quadratic diffusion term activates), so the check must
    # refuse rather than silently drop the Malliavin terms
    prob, oracle, grid, ctrl, res, sec, derivs = _heat_derivs()
    n = oracle.n_modes
    U_ref = np.array(res.U)
    U_ref[:, :, n] = 0.4
    derivs_off = evaluate_derivatives(prob, grid, res.X, U_ref, second=sec)
    v = np.zeros(2 * n)
    v[n] = 0.9
    with pytest.raises(UnsupportedRegimeError):
        check_pointwise_necessary(derivs_off, 0.5, v)


# ---------------------------------------------------------------------------
# singularity classification


def test_heat_optimum_classifies_singular():
    prob, oracle, grid, ctrl, res, sec, derivs = _heat_derivs()
    n = oracle.n_modes
    sample = np.zeros((4, 2 * n))
    sample[:, :n] = np.random.default_rng(60).standard_normal((4, n))
    rep = classify_singular(derivs, sample)
    assert rep.details["classification"] == "singular"


def test_definite_lq_classifies_non_singular():
    prob, grid, ctrl, res, derivs = _lq_derivs("lq_certificate")
    sample = np.random.default_rng(61).standard_normal((4, prob.control_dim))
    rep = classify_singular(derivs, sample)
    assert rep.details["classification"] == "non-singular"


# ---------------------------------------------------------------------------
# Taylor consistency and sufficiency


def test_taylor_exact_on_lq():
    prob, grid, ctrl, res, derivs = _lq_derivs(n_paths=256, M=64)
    vals = 0.5 * np.random.default_rng(70).standard_normal(
        (grid.M, prob.control_dim))
    direction = GridControl(vals)
    dU = np.broadcast_to(vals, (grid.n_paths,) + vals.shape)
    rep = taylor_consistency(prob, grid, ctrl, direction, np.ones(prob.dim),
                             [0.5, 0.25, 0.125], derivs, dU)
    assert rep["all_at_noise"], rep["rungs"]


def test_certificate_passes_on_definite_lq():
    prob, grid, ctrl, res, derivs = _lq_derivs("lq_certificate")
    rng = np.random.default_rng(80)
    tt = grid.times[:-1][:, None]
    # temporally smooth directions: for these the grid power-mean norms are
    # comparable and the N >= nu I curvature dominates the ratio
    dirs = [(rng.standard_normal((1, prob.control_dim))
             + rng.standard_normal((1, prob.control_dim)) * tt
             + rng.standard_normal((1, prob.control_dim)) * tt ** 2)
            for _ in range(6)]
    rep = sufficient_certificate(derivs, dirs, rho=0.25)
    assert rep.verdict == "satisfied", rep.estimate


def test_certificate_fails_on_indefinite_lq_with_witness():
    prob, grid, ctrl, res, derivs = _lq_derivs("lq_indefinite")
    # witness direction concentrated on the negative-curvature coordinate
    w = np.zeros((grid.M, prob.control_dim))
    w[:, 0] = 1.0
    rng = np.random.default_rng(81)
    dirs = [0.5 * rng.standard_normal((grid.M, prob.control_dim)), w]
    rep = sufficient_certificate(derivs, dirs, rho=0.25)
    assert rep.verdict == "violated"
    assert rep.details["worst_direction"] == 1


def test_growth_probe_heat_at_zero_rho():
    # J >= 0 = J(ubar) at the optimum: ratio nonnegative, rho = 0 passes
    prob, oracle, grid, ctrl, res, sec, derivs = _heat_derivs(M=128,
                                                              n_paths=128)
    x0 = np.concatenate([oracle.a_coeffs, np.zeros(oracle.n_modes)])
    rep = quadratic_growth_probe(prob, grid, ctrl, x0, sigma=0.3, rho=0.0,
                                 n_samples=10, seed=5)
    assert rep.verdict == "satisfied"
    assert rep.estimate >= -3.0 * rep.stderr


def test_growth_probe_definite_lq_reaches_nu_over_two():
    prob, grid, ctrl, res, derivs = _lq_derivs("lq_certificate", M=64,
                                               n_paths=256)
    # at the optimal control u = 0 of the certificate instance
    zero = GridControl(np.zeros((grid.M, prob.control_dim)))
    rep = quadratic_growth_probe(prob, grid, zero, np.zeros(prob.dim),
                                 sigma=0.3, rho=1.0, n_samples=10, seed=6)
    assert rep.verdict == "satisfied"
    assert rep.estimate >= 0.5 - 0.05


# ---------------------------------------------------------------------------
# norms


def test_control_grid_norm_l2_and_sup():
    vals = np.ones((4, 2))  # |v_k| = sqrt(2)
    dt = 0.25
    assert control_grid_norm(vals, dt, 2) == pytest.approx(np.sqrt(2.0))
    assert control_grid_norm(vals, dt, np.inf) == pytest.approx(np.sqrt(2.0))
    vals[2] = [3.0, 4.0]
    assert control_grid_norm(vals, dt, np.inf) == pytest.approx(5.0)
