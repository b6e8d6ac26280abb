"""Backward (adjoint) equations and their verification.

Three building blocks:
  * a matrix Lyapunov/Riccati-type terminal-value ODE solver, propagated
    with exact matrix exponentials of the vectorized linear operator so
    stiff generators cost no accuracy;
  * two solvers for the first adjoint pair (p, q): a closed-form affine
    ansatz p = -Pi x - r for affine dynamics, and a least-squares Monte
    Carlo regression that only needs simulated paths;
  * Monte Carlo checks of the duality identities that characterize the
    first and second adjoints against independently simulated test
    processes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import expm

from .noise import BrownianGrid, brownian_paths
from .spectral import semigroup_factor


class UnsupportedRegimeError(RuntimeError):
    """Requested solver is only valid for a structural regime the given
    problem does not satisfy (e.g. affine dynamics, deterministic
    coefficients)."""


class IllConditionedBasisError(RuntimeError):
    """Regression feature matrix is numerically rank-deficient."""


# ---------------------------------------------------------------------------
# exact-propagator linear ODE machinery


def _step_maps(Mmat: np.ndarray, h: float):
    """Return (E, Phi) with y(s + h) = E y(s) + h Phi f for dy/ds = M y + f,
    f constant over the step.  Computed from one augmented exponential."""
    n = Mmat.shape[0]
    aug = np.zeros((2 * n, 2 * n))
    aug[:n, :n] = Mmat * h
    aug[:n, n:] = np.eye(n) * h
    big = expm(aug)
    return big[:n, :n], big[:n, n:] / h


def _vec_operator(Aef: np.ndarray, K: Optional[np.ndarray]) -> np.ndarray:
    """Row-major vectorization of P -> Aef^T P + P Aef + K^T P K."""
    d = Aef.shape[0]
    I = np.eye(d)
    L = np.kron(Aef.T, I) + np.kron(I, Aef.T)
    if K is not None:
        L += np.kron(K.T, K.T)
    return L


def solve_lyapunov(lam, J, K, F, P_T, times) -> np.ndarray:
    """Terminal-value matrix ODE
        dP/dt = -(A + J)^T P - P (A + J) - K^T P K + F,   P(T) = P_T,
    with A = diag(lam).  Constant coefficients may be arrays or None;
    time-dependent coefficients may be callables t -> matrix.  Returns P at
    every node of the uniform `times` grid, symmetrized, shape (n, d, d).
    """
    times = np.asarray(times, dtype=float)
    steps = np.diff(times)
    if times.size < 2 or not np.allclose(steps, steps[0], rtol=1e-10):
        raise ValueError("times must be a uniform grid with >= 2 nodes")
    h = float(steps[0])
    d = np.asarray(lam).size
    A = np.diag(np.asarray(lam, dtype=float))
    P_T = np.asarray(P_T, dtype=float)
    time_dep = callable(J) or callable(K) or callable(F)

    def coeffs(t):
        Jt = J(t) if callable(J) else J
        Kt = K(t) if callable(K) else K
        Ft = F(t) if callable(F) else F
        Aef = A + (0 if Jt is None else np.asarray(Jt))
        Kt = None if Kt is None else np.asarray(Kt)
        Ft = np.zeros((d, d)) if Ft is None else np.asarray(Ft, dtype=float)
        return Aef, Kt, Ft

    out = np.empty((times.size, d, d))
    out[-1] = 0.5 * (P_T + P_T.T)
    vec = out[-1].ravel()
    if not time_dep:
        Aef, Kc, Fc = coeffs(times[0])
        E, Phi = _step_maps(_vec_operator(Aef, Kc), h)
        fvec = Fc.ravel()
        for k in range(times.size - 2, -1, -1):
            # backward variable s = T - t: dvec/ds = L vec - vec(F)
            vec = E @ vec - h * (Phi @ fvec)
            P = vec.reshape(d, d)
            out[k] = 0.5 * (P + P.T)
            vec = out[k].ravel()
    else:
        for k in range(times.size - 2, -1, -1):
            Aef, Kc, Fc = coeffs(0.5 * (times[k] + times[k + 1]))
            E, Phi = _step_maps(_vec_operator(Aef, Kc), h)
            vec = E @ vec - h * (Phi @ Fc.ravel())
            P = vec.reshape(d, d)
            out[k] = 0.5 * (P + P.T)
            vec = out[k].ravel()
    return out


# ---------------------------------------------------------------------------
# second adjoint (deterministic-coefficient regime)


@dataclass
class SecondAdjointResult:
    """Second adjoint P on the time grid; correction terms vanish in the
    deterministic-coefficient regime, so P is a deterministic matrix path."""

    times: np.ndarray
    P: np.ndarray  # (n_times, d, d)

    def at(self, k: int) -> np.ndarray:
        return self.P[k]


def _affine_blocks(problem):
    if not problem.is_affine:
        raise UnsupportedRegimeError(
            "closed-form adjoint solvers require affine dynamics with "
            "deterministic coefficients")
    return problem.B1, problem.B2, problem.R, problem.G


def solve_second_adjoint(problem, times) -> SecondAdjointResult:
    """Second adjoint for problems with deterministic x-coefficients.

    With J = a_x, K = b_x constant and the Hamiltonian Hessian in x equal
    to -R (second x-derivatives of the dynamics vanish), P solves
        dP/dt = -(A + J)^T P - P (A + J) - K^T P K + R,   P(T) = -h_xx.
    """
    B1, B2, R, G = _affine_blocks(problem)
    d = problem.dim
    P_T = -(G if G is not None else np.zeros((d, d)))
    P = solve_lyapunov(problem.lam, B1, B2, R, P_T, times)
    return SecondAdjointResult(np.asarray(times, dtype=float), P)


# ---------------------------------------------------------------------------
# first adjoint: shared path representation


@dataclass
class AdjointPath:
    """Per-path adjoint values on the grid: p (n_paths, M+1, d) at nodes,
    q (n_paths, M, d) on step intervals."""

    times: np.ndarray
    p: np.ndarray
    q: np.ndarray
    method: str

    def sup_rms_p(self) -> float:
        return float(np.max(np.sqrt(np.mean(np.sum(self.p ** 2, axis=-1), axis=0))))

    def sup_rms_q(self) -> float:
        return float(np.max(np.sqrt(np.mean(np.sum(self.q ** 2, axis=-1), axis=0))))


def _controls_along(problem, grid, control, X_full):
    """Evaluate the control at every node along stored state paths."""
    W = brownian_paths(grid)
    U = np.empty((grid.n_paths, grid.M, problem.control_dim))
    for k in range(grid.M):
        U[:, k] = control.value(k * grid.dt, k, X_full[:, k], W[:, k])
    return U, W


# ---------------------------------------------------------------------------
# first adjoint, affine ansatz


def solve_first_adjoint_affine(problem, grid: BrownianGrid, control, X_full,
                               U_full=None) -> AdjointPath:
    """Affine ansatz p = -Pi x - r, q = -Pi b(t, x, u).

    Pi solves the Riccati-type ODE
      Pi' = -(A+B1)^T Pi - Pi (A+B1) - B2^T Pi B2 - R,  Pi(T) = h_xx,
    and the offset r the linear ODE
      r' = -(A+B1)^T r - Pi(C1 u + beta) - B2^T Pi (C2 u + gamma + quad(u,u))
           - M u,  r(T) = 0.
    The r forcing uses the path mean of the control terms; this is exact
    whenever the reference control is deterministic.
    """
    B1, B2, R, G = _affine_blocks(problem)
    d = problem.dim
    times = grid.times
    h = grid.dt
    # Pi = -P of the second-adjoint ODE with the same data
    Pi = -solve_lyapunov(problem.lam, B1, B2, R,
                         -(G if G is not None else np.zeros((d, d))), times)
    if U_full is None:
        U_full, _ = _controls_along(problem, grid, control, X_full)
    u_mean = np.mean(U_full, axis=0)                       # (M, m)
    quad_mean = (np.mean(np.einsum("kij,pti,ptj->ptk", problem.quad,
                                   U_full, U_full), axis=0)
                 if problem.quad is not None and np.any(U_full)
                 else np.zeros((grid.M, d)))

    def forcing(k):
        t = times[k]
        ub = u_mean[k]
        drift_in = np.zeros(d)
        if problem.C1 is not None:
            drift_in += problem.C1 @ ub
        if problem.beta is not None:
            drift_in += problem.beta(t)
        diff_in = quad_mean[k].copy()
        if problem.C2 is not None:
            diff_in += problem.C2 @ ub
        if problem.gamma is not None:
            diff_in += problem.gamma(t)
        out = Pi[k] @ drift_in
        if B2 is not None:
            out += B2.T @ (Pi[k] @ diff_in)
        if problem.M is not None:
            out += problem.M @ ub
        return out

    Aef = np.diag(problem.lam) + (0 if B1 is None else B1)
    E, Phi = _step_maps(Aef.T, h)          # dr/ds = Aef^T r + phi, s = T - t
    r = np.zeros((grid.M + 1, d))
    phi_next = None
    for k in range(grid.M - 1, -1, -1):
        phi_k = forcing(k)
        if phi_next is None:
            phi_next = phi_k
        r[k] = E @ r[k + 1] + h * (Phi @ (0.5 * (phi_k + phi_next)))
        phi_next = phi_k

    p = -np.einsum("tij,ptj->pti", Pi, X_full) - r[None, :, :]
    b = np.empty((grid.n_paths, grid.M, d))
    for k in range(grid.M):
        b[:, k] = problem.diffusion(times[k], X_full[:, k], U_full[:, k])
    q = -np.einsum("tij,ptj->pti", Pi[:-1], b)
    return AdjointPath(times=times, p=p, q=q, method="affine")


# ---------------------------------------------------------------------------
# first adjoint, least-squares Monte Carlo regression


def poly_features(X: np.ndarray, degree: int = 2) -> np.ndarray:
    """Monomial features [1, x_i, x_i x_j (i <= j)] of a state batch."""
    n, d = X.shape
    cols = [np.ones((n, 1)), X]
    if degree >= 2:
        iu, ju = np.triu_indices(d)
        cols.append(X[:, iu] * X[:, ju])
    return np.concatenate(cols, axis=1)


def _fit(Feat: np.ndarray, targets: np.ndarray, cond_limit: float):
    """Least-squares fit returning fitted values.

    Columns are rms-scaled and the solve uses a truncated pseudoinverse, so
    structurally degenerate bases (identically-zero or duplicated features,
    e.g. a state component pinned at zero) are handled by rank reduction.
    A basis with no usable directions, or fewer samples than features,
    raises IllConditionedBasisError.
    """
    n, nf = Feat.shape
    if n < nf:
        raise IllConditionedBasisError(
            f"{n} samples cannot identify {nf} regression features")
    scale = np.sqrt(np.mean(Feat ** 2, axis=0))
    keep = scale > 1e-14 * max(scale.max(), 1e-300)
    if not np.any(keep):
        raise IllConditionedBasisError("all regression features vanish")
    A = Feat[:, keep] / scale[keep]
    coef, _, rank, s = np.linalg.lstsq(A, targets, rcond=1.0 / cond_limit)
    if rank == 0:
        raise IllConditionedBasisError("regression basis has numerical rank 0")
    return A @ coef


def solve_first_adjoint_regression(problem, grid: BrownianGrid, control,
                                   X_full, U_full=None, degree: int = 2,
                                   cond_limit: float = 1e12) -> AdjointPath:
    """Backward least-squares Monte Carlo solution of the first adjoint.

    At each step the time-(k+1) value is transported by e^{A^T dt}, the
    martingale integrand q_k is the increment-weighted regression of the
    transported value on polynomial state features, and p_k is the plain
    regression minus the driver times dt.  The degree-2 basis is exact for
    affine-quadratic problems, where conditional expectations of the
    adjoint are quadratic-free (affine) functions of the state.
    """
    if U_full is None:
        U_full, _ = _controls_along(problem, grid, control, X_full)
    d, h = problem.dim, grid.dt
    E = semigroup_factor(problem.lam, h)
    times = grid.times
    p = np.empty((grid.n_paths, grid.M + 1, d))
    q = np.empty((grid.n_paths, grid.M, d))
    p[:, -1] = -problem.term_h_dx_vec(X_full[:, -1])
    for k in range(grid.M - 1, -1, -1):
        t = times[k]
        Xk, Uk = X_full[:, k], U_full[:, k]
        transported = E * p[:, k + 1]
        Feat = poly_features(Xk, degree)
        w = (grid.increments[:, k] / h)[:, None]
        p_hat = _fit(Feat, transported, cond_limit)
        # martingale control variate: regressing (p~ - p^) dW/h instead of
        # p~ dW/h removes the O(1/sqrt(h)) variance of the naive estimator
        q[:, k] = _fit(Feat, (transported - p_hat) * w, cond_limit)
        driver = (-problem.drift_dx_T(t, Xk, Uk, p_hat)
                  - problem.diffusion_dx_T(t, Xk, Uk, q[:, k])
                  + problem.cost_g_dx_vec(t, Xk, Uk))
        p[:, k] = p_hat - h * driver
    return AdjointPath(times=times, p=p, q=q, method="regression")


# ---------------------------------------------------------------------------
# duality (transposition) checks


def _smooth_node_values(rng, times, dim, scale=1.0):
    """Random temporally smooth deterministic node values: a low-order
    polynomial in t with random coefficients, shape (n_nodes, dim)."""
    tt = times / max(times[-1], 1e-300)
    basis = np.stack([np.ones_like(tt), tt, tt ** 2], axis=1)  # (n, 3)
    coef = rng.standard_normal((3, dim)) * scale
    return basis @ coef


def verify_transposition(problem, grid: BrownianGrid, adjoint: AdjointPath,
                         X_full, U_full, n_tuples: int = 10, seed: int = 0,
                         c_dt: float = 1.0) -> dict:
    """Monte Carlo check of the identity characterizing the first adjoint.

    For a test process d phi = (A phi + v1) dt + v2 dW started at (t_j, eta),
        E<phi(T), p(T)> = E<eta, p(t_j)>
                          + E int_{t_j}^T (<v1, p> + <phi, f> + <v2, q>) ds
    with driver f = -a_x^T p - b_x^T q + g_x.  Residuals are per-path paired
    differences; each tuple passes if |mean| <= 3 stderr + c_dt sqrt(dt) * scale.
    """
    rng = np.random.Generator(np.random.Philox(
        key=np.array([seed, 0xD0A1], dtype=np.uint64)))
    h = grid.dt
    E = semigroup_factor(problem.lam, h)
    times = grid.times
    d = problem.dim
    rows = []
    for i in range(n_tuples):
        j = int(rng.integers(0, grid.M // 2 + 1))
        eta = rng.standard_normal(d)
        v1 = _smooth_node_values(rng, times, d)
        v2 = _smooth_node_values(rng, times, d)
        phi = np.broadcast_to(eta, (grid.n_paths, d)).copy()
        integral = np.zeros(grid.n_paths)
        for k in range(j, grid.M):
            t = times[k]
            f = (-problem.drift_dx_T(t, X_full[:, k], U_full[:, k], adjoint.p[:, k])
                 - problem.diffusion_dx_T(t, X_full[:, k], U_full[:, k], adjoint.q[:, k])
                 + problem.cost_g_dx_vec(t, X_full[:, k], U_full[:, k]))
            integral += h * (adjoint.p[:, k] @ v1[k] + np.sum(phi * f, axis=1)
                             + adjoint.q[:, k] @ v2[k])
            phi = E * (phi + v1[k] * h + v2[k] * grid.increments[:, k][:, None])
        lhs = np.sum(phi * adjoint.p[:, -1], axis=1)
        rhs0 = adjoint.p[:, j] @ eta
        resid = lhs - rhs0 - integral
        mean = float(np.mean(resid))
        stderr = float(np.std(resid, ddof=1) / np.sqrt(grid.n_paths))
        scale = 1.0 + float(np.mean(np.abs(lhs)) + np.mean(np.abs(rhs0 + integral)))
        margin = 3.0 * stderr + c_dt * np.sqrt(h) * scale
        rows.append({"tuple": i, "t_start": float(times[j]), "residual": mean,
                     "stderr": stderr, "margin": margin,
                     "passed": bool(abs(mean) <= margin)})
    return {"identity": "first_adjoint_transposition",
            "n_tuples": n_tuples, "rows": rows,
            "all_passed": all(r["passed"] for r in rows),
            "max_abs_residual": max(abs(r["residual"]) for r in rows)}


def verify_relaxed_transposition(problem, grid: BrownianGrid,
                                 second: SecondAdjointResult,
                                 n_tuples: int = 10, seed: int = 0,
                                 c_dt: float = 1.0) -> dict:
    """Monte Carlo check of the bilinear identity characterizing the second
    adjoint in the deterministic-coefficient regime (where the martingale
    correction terms vanish).

    For test processes d phi_i = ((A+J) phi_i + v_i1) dt + (K phi_i + v_i2) dW,
      E<P(T) phi1(T), phi2(T)> - E<P(t_j) eta1, eta2>
        = E int [ <F phi1, phi2> + <P v11, phi2> + <P phi1, v21>
                  + <P K phi1, v22> + <P v12, K phi2> + <P v12, v22> ] ds
    with F = R (the Hamiltonian x-Hessian with flipped sign).
    """
    B1, B2, R, _ = _affine_blocks(problem)
    rng = np.random.Generator(np.random.Philox(
        key=np.array([seed, 0xD0A2], dtype=np.uint64)))
    d, h = problem.dim, grid.dt
    Aef = np.diag(problem.lam) + (0 if B1 is None else B1)
    Eef = expm(Aef * h)
    K = B2
    F = R if R is not None else np.zeros((d, d))
    times = grid.times
    P = second.P
    rows = []
    for i in range(n_tuples):
        j = int(rng.integers(0, grid.M // 2 + 1))
        eta1 = rng.standard_normal(d)
        eta2 = rng.standard_normal(d)
        v11 = _smooth_node_values(rng, times, d)
        v12 = _smooth_node_values(rng, times, d)
        v21 = _smooth_node_values(rng, times, d)
        v22 = _smooth_node_values(rng, times, d)
        phi1 = np.broadcast_to(eta1, (grid.n_paths, d)).copy()
        phi2 = np.broadcast_to(eta2, (grid.n_paths, d)).copy()
        integral = np.zeros(grid.n_paths)
        for k in range(j, grid.M):
            Pk = P[k]
            Kphi1 = phi1 @ K.T if K is not None else 0.0
            Kphi2 = phi2 @ K.T if K is not None else 0.0
            term = np.einsum("pi,ij,pj->p", phi2, F, phi1)
            term += phi2 @ (Pk @ v11[k])
            term += (phi1 @ Pk.T) @ v21[k]
            if K is not None:
                term += (Kphi1 @ Pk.T) @ v22[k]
                term += np.sum((Pk @ v12[k]) * Kphi2, axis=1)
            term += v22[k] @ (Pk @ v12[k])
            integral += h * term
            dW = grid.increments[:, k][:, None]
            phi1 = (phi1 + v11[k] * h + (Kphi1 + v12[k]) * dW) @ Eef.T
            phi2 = (phi2 + v21[k] * h + (Kphi2 + v22[k]) * dW) @ Eef.T
        lhs = np.einsum("pi,ij,pj->p", phi2, P[-1], phi1)
        rhs0 = float(eta2 @ (P[j] @ eta1))
        resid = lhs - rhs0 - integral
        mean = float(np.mean(resid))
        stderr = float(np.std(resid, ddof=1) / np.sqrt(grid.n_paths))
        scale = 1.0 + float(np.mean(np.abs(lhs)) + np.mean(np.abs(rhs0 + integral)))
        margin = 3.0 * stderr + c_dt * np.sqrt(h) * scale
        rows.append({"tuple": i, "t_start": float(times[j]), "residual": mean,
                     "stderr": stderr, "margin": margin,
                     "passed": bool(abs(mean) <= margin)})
    return {"identity": "second_adjoint_relaxed_transposition",
            "n_tuples": n_tuples, "rows": rows,
            "all_passed": all(r["passed"] for r in rows),
            "max_abs_residual": max(abs(r["residual"]) for r in rows)}
