"""Optimality-condition quantities: Hamiltonian derivatives, first-order
gap, quadratic forms, necessary-condition checks, singularity
classification, sufficiency certificates and growth probes.

Every estimator reports a Monte Carlo point estimate with standard error
and an explicit discretization allowance; verdicts are three-valued
(satisfied / violated / inconclusive) and never override the numbers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .adjoint import UnsupportedRegimeError
from .forward import ShiftedControl, solve_state
from .noise import BrownianGrid
from .spectral import semigroup_factor


# ---------------------------------------------------------------------------
# reports


@dataclass
class ConditionReport:
    """Estimate of one optimality quantity with uncertainty and verdict."""

    quantity: str
    estimate: float
    stderr: float
    allowance: float
    verdict: str            # satisfied | violated | inconclusive
    details: dict = field(default_factory=dict)

    @property
    def margin(self) -> float:
        return 3.0 * self.stderr + self.allowance

    def to_dict(self) -> dict:
        return {"quantity": self.quantity, "estimate": self.estimate,
                "stderr": self.stderr, "allowance": self.allowance,
                "verdict": self.verdict, "details": self.details}


def _verdict_nonpositive(est, margin):
    return "satisfied" if est <= margin else "violated"


def _verdict_zero(est, margin):
    return "satisfied" if abs(est) <= margin else "violated"


def _mean_stderr(paths: np.ndarray):
    n = paths.shape[0]
    se = float(np.std(paths, ddof=1, axis=0) / np.sqrt(n)) if n > 1 else 0.0
    return float(np.mean(paths)), se


# ---------------------------------------------------------------------------
# Hamiltonian


def hamiltonian(problem, t, x, u, k1, k2):
    """<k1, a(t,x,u)> + <k2, b(t,x,u)> - g(t,x,u), batched."""
    return (np.sum(k1 * problem.drift(t, x, u), axis=-1)
            + np.sum(k2 * problem.diffusion(t, x, u), axis=-1)
            - problem.cost_g(t, x, u))


# ---------------------------------------------------------------------------
# evaluated derivatives along a reference quadruple


class EvaluatedDerivatives:
    """Hamiltonian derivative blocks along (x, u, p, q) with the second
    adjoint P, on a common grid.

    Adjoint arrays may be omitted (treated as identically zero), which is
    the certified regime for reference controls where (p, q) vanish.
    """

    def __init__(self, problem, grid: BrownianGrid, X_full, U_full,
                 adjoint=None, second=None):
        if X_full.shape[1] != grid.M + 1:
            raise ValueError("state storage does not match the grid")
        self.problem = problem
        self.grid = grid
        self.X = X_full
        self.U = U_full
        self.p = adjoint.p if adjoint is not None else None
        self.q = adjoint.q if adjoint is not None else None
        self.P = second.P if second is not None else None
        self.times = grid.times
        self.adjoint_assumed_zero = adjoint is None

    # -- pointwise blocks ---------------------------------------------------
    def hu(self, k):
        """H_u = a_u^T p + b_u^T q - g_u at node k, per path, shape (n, m)."""
        t, Xk, Uk = self.times[k], self.X[:, k], self.U[:, k]
        out = -self.problem.cost_g_du_vec(t, Xk, Uk)
        if self.p is not None:
            out = out + self.problem.drift_du_T(t, Xk, Uk, self.p[:, k])
            out = out + self.problem.diffusion_du_T(t, Xk, Uk, self.q[:, k])
        return out

    def hx(self, k):
        t, Xk, Uk = self.times[k], self.X[:, k], self.U[:, k]
        out = -self.problem.cost_g_dx_vec(t, Xk, Uk)
        if self.p is not None:
            out = out + self.problem.drift_dx_T(t, Xk, Uk, self.p[:, k])
            out = out + self.problem.diffusion_dx_T(t, Xk, Uk, self.q[:, k])
        return out

    def huu_form(self, k, V1, V2):
        """<H_uu V1, V2> per path: p.a_uu + q.b_uu - g_uu contractions."""
        t, Xk, Uk = self.times[k], self.X[:, k], self.U[:, k]
        out = -self.problem.cost_g_duu(t, Xk, Uk, V1, V2)
        if self.p is not None:
            out = out + np.sum(self.p[:, k]
                               * self.problem.drift_duu(t, Xk, Uk, V1, V2), axis=-1)
            out = out + np.sum(self.q[:, k]
                               * self.problem.diffusion_duu(t, Xk, Uk, V1, V2), axis=-1)
        return out

    def hxu_form(self, k, Y, V):
        t, Xk, Uk = self.times[k], self.X[:, k], self.U[:, k]
        out = -self.problem.cost_g_dxu(t, Xk, Uk, Y, V)
        if self.p is not None:
            out = out + np.sum(self.p[:, k]
                               * self.problem.drift_dxu(t, Xk, Uk, Y, V), axis=-1)
            out = out + np.sum(self.q[:, k]
                               * self.problem.diffusion_dxu(t, Xk, Uk, Y, V), axis=-1)
        return out

    def b2v(self, k, V):
        """Diffusion control derivative b_u(t_k) applied to V, per path."""
        return self.problem.diffusion_du(self.times[k], self.X[:, k],
                                         self.U[:, k], V)

    def s_pair(self, k, Y, V):
        """<S(t_k) Y, V> per path: H_xu(Y,V) + <P Y, a_u V> + <P b_x Y, b_u V>."""
        if self.P is None:
            raise ValueError("second adjoint required for S pairings")
        t, Xk, Uk = self.times[k], self.X[:, k], self.U[:, k]
        Pk = self.P[k]
        out = self.hxu_form(k, Y, V)
        out = out + np.sum((Y @ Pk.T) * self.problem.drift_du(t, Xk, Uk, V), axis=-1)
        bxY = self.problem.diffusion_dx(t, Xk, Uk, Y)
        out = out + np.sum((bxY @ Pk.T) * self.b2v(k, V), axis=-1)
        return out

    def s_matrix(self, k):
        """Deterministic S(t_k) as an (m, d) matrix, when available.

        For affine problems S = -M^T + C1^T P + b2^T P B2 with b2 the
        (possibly control-dependent) diffusion control-derivative; the
        matrix is returned only when it is path-independent.
        """
        pr = self.problem
        if not pr.is_affine or self.P is None:
            raise UnsupportedRegimeError("deterministic S needs affine data and P")
        if not self.adjoint_assumed_zero and self.p is not None:
            if (np.max(np.abs(self.p)) > 0 and pr.quad is not None):
                # p,q-dependent H_xu terms vanish for affine dynamics anyway
                pass
        Pk = self.P[k]
        d, m = pr.dim, pr.control_dim
        S = np.zeros((m, d))
        if pr.M is not None:
            S -= pr.M.T
        if pr.C1 is not None:
            S += pr.C1.T @ Pk
        B2 = pr.B2 if pr.B2 is not None else np.zeros((d, d))
        b2 = np.zeros((d, m))
        if pr.C2 is not None:
            b2 += pr.C2
        if pr.quad is not None:
            Uk = self.U[:, min(k, self.U.shape[1] - 1)]
            per_path = 2.0 * np.einsum("kij,pj->pki", pr.quad, Uk)
            if np.max(np.abs(per_path - per_path[0])) > 1e-10:
                raise UnsupportedRegimeError(
                    "S is path-dependent (stochastic b_u under the quadratic "
                    "diffusion term)")
            b2 += per_path[0]
        S += b2.T @ Pk @ B2
        return S


def evaluate_derivatives(problem, grid, X_full, U_full, adjoint=None,
                         second=None) -> EvaluatedDerivatives:
    return EvaluatedDerivatives(problem, grid, X_full, U_full, adjoint, second)


# ---------------------------------------------------------------------------
# first variation from stored arrays (path-dependent directions allowed)


def first_variation_values(problem, grid: BrownianGrid, X_full, U_full, dU):
    """Propagate the first variation y along stored reference paths for a
    per-path direction dU of shape (n_paths, M, m); returns (n_paths, M+1, d)."""
    h = grid.dt
    E = semigroup_factor(problem.lam, h)
    Y = np.zeros((grid.n_paths, problem.dim))
    out = np.empty((grid.n_paths, grid.M + 1, problem.dim))
    out[:, 0] = 0.0
    for k in range(grid.M):
        t = grid.times[k]
        Xk, Uk, Vk = X_full[:, k], U_full[:, k], dU[:, k]
        ya = problem.drift_dx(t, Xk, Uk, Y) + problem.drift_du(t, Xk, Uk, Vk)
        yb = (problem.diffusion_dx(t, Xk, Uk, Y)
              + problem.diffusion_du(t, Xk, Uk, Vk))
        Y = E * (Y + ya * h + yb * grid.increments[:, k][:, None])
        out[:, k + 1] = Y
    return out


# ---------------------------------------------------------------------------
# first-order gap


def first_order_gap(derivs: EvaluatedDerivatives, dU,
                    allowance: float = 0.0) -> ConditionReport:
    """E int <H_u, u - ubar> dt; verdict 'satisfied' when zero within margin.

    The pairing is the plain coefficient dot product, i.e. the directional
    derivative pairing (the Riesz representative convention is recorded in
    the problem's norm note).
    """
    grid = derivs.grid
    acc = np.zeros(grid.n_paths)
    for k in range(grid.M):
        acc += grid.dt * np.sum(derivs.hu(k) * dU[:, k], axis=-1)
    est, se = _mean_stderr(acc)
    return ConditionReport("first_order_gap", est, se, allowance,
                           _verdict_zero(est, 3 * se + allowance),
                           {"pairing": "coefficient dot product",
                            "nonpositive": est <= 3 * se + allowance})


# ---------------------------------------------------------------------------
# quadratic forms Lambda-tilde / Lambda


def _lambda_tilde_paths(derivs: EvaluatedDerivatives, dU, Y):
    """Per-path value of the quadratic form integrand sum."""
    grid = derivs.grid
    if derivs.P is None:
        raise ValueError("lambda_tilde requires the second adjoint P")
    acc = np.zeros(grid.n_paths)
    for k in range(grid.M):
        Vk = dU[:, k]
        Pk = derivs.P[k]
        term = derivs.huu_form(k, Vk, Vk)
        bv = derivs.b2v(k, Vk)
        term = term + np.sum((bv @ Pk.T) * bv, axis=-1)
        term = term + 2.0 * derivs.s_pair(k, Y[:, k], Vk)
        acc += grid.dt * term
    return acc


def lambda_tilde(derivs: EvaluatedDerivatives, dU, Y=None,
                 allowance: float = 0.0) -> ConditionReport:
    """Monte Carlo estimate of the quadratic form

        Lambda~(v) = E int [<H_uu v, v> + <P b_u v, b_u v>] dt
                     + 2 E int <S y^v, v> dt

    for a per-path direction dU (n_paths, M, m); y^v is co-propagated on
    the same noise when not supplied."""
    if Y is None:
        Y = first_variation_values(derivs.problem, derivs.grid, derivs.X,
                                   derivs.U, dU)
    acc = _lambda_tilde_paths(derivs, dU, Y)
    est, se = _mean_stderr(acc)
    return ConditionReport("lambda_tilde", est, se, allowance,
                           "satisfied" if np.isfinite(est) else "inconclusive",
                           {"n_paths": derivs.grid.n_paths,
                            "paths": acc})


def lambda_full(derivs: EvaluatedDerivatives, dU, Y=None,
                allowance: float = 0.0) -> ConditionReport:
    """Lambda(v): equals lambda_tilde in the deterministic-coefficient
    regime, where the operator-valued correction terms vanish."""
    if not derivs.problem.is_affine:
        raise UnsupportedRegimeError(
            "Lambda with vanishing corrections requires the "
            "deterministic-coefficient (affine) regime")
    rep = lambda_tilde(derivs, dU, Y, allowance)
    rep.quantity = "lambda"
    rep.details["corrections"] = "zero (deterministic-coefficient regime)"
    return rep


def direct_lq_form(problem, grid: BrownianGrid, dU, Y) -> ConditionReport:
    """Independent expression of the quadratic form for affine-quadratic
    problems, with the sign convention locked to the Hamiltonian one:

        -E int ( <R dx, dx> + <N du, du> + 2 <dx, M du> ) dt,  dx = y^v.
    """
    acc = np.zeros(grid.n_paths)
    for k in range(grid.M):
        Yk, Vk = Y[:, k], dU[:, k]
        term = np.zeros(grid.n_paths)
        if problem.R is not None:
            term += np.einsum("pi,ij,pj->p", Yk, problem.R, Yk)
        if problem.N is not None:
            term += np.einsum("pi,ij,pj->p", Vk, problem.N, Vk)
        if problem.M is not None:
            term += 2.0 * np.einsum("pi,ij,pj->p", Yk, problem.M, Vk)
        acc += grid.dt * term
    est, se = _mean_stderr(-acc)
    return ConditionReport("direct_lq_quadratic_form", est, se, 0.0,
                           "satisfied", {"paths": -acc})


# ---------------------------------------------------------------------------
# integral second-order necessary condition


def check_integral_necessary(derivs: EvaluatedDerivatives, U_other,
                             allowance: float = 0.0) -> ConditionReport:
    """Second-order necessary condition at a (candidate) singular optimum:
    the quadratic form Lambda~(u - ubar) must be nonpositive, provided the
    first-order gap vanishes (the theorem's hypothesis)."""
    dU = U_other - derivs.U
    gap = first_order_gap(derivs, dU, allowance)
    if gap.verdict != "satisfied":
        return ConditionReport("integral_necessary", gap.estimate, gap.stderr,
                               allowance, "inconclusive",
                               {"reason": "first-order gap not zero within "
                                          "margin; hypothesis unmet",
                                "gap": gap.to_dict()})
    lam = lambda_tilde(derivs, dU, allowance=allowance)
    verdict = _verdict_nonpositive(lam.estimate, lam.margin)
    return ConditionReport("integral_necessary", lam.estimate, lam.stderr,
                           allowance, verdict, {"gap": gap.to_dict()})


# ---------------------------------------------------------------------------
# singularity classification


def classify_singular(derivs: EvaluatedDerivatives, sample_v,
                      tol: float = 1e-6) -> ConditionReport:
    """Singular in the classical sense: H_u = 0 and
    <(H_uu + b_u^* P b_u)(v - ubar), v - ubar> = 0 for control values v.

    Both identities are checked at every grid node against the supplied
    sample of control values; worst node reported."""
    grid = derivs.grid
    sample_v = np.atleast_2d(sample_v)
    worst_hu = 0.0
    worst_quad = 0.0
    scale = 1.0 + float(np.sqrt(np.mean(derivs.U ** 2)))
    for k in range(grid.M):
        worst_hu = max(worst_hu, float(np.sqrt(np.max(
            np.sum(derivs.hu(k) ** 2, axis=-1)))))
        Pk = derivs.P[k] if derivs.P is not None else None
        for v in sample_v:
            dV = v[None, :] - derivs.U[:, k]
            quad = derivs.huu_form(k, dV, dV)
            if Pk is not None:
                bv = derivs.b2v(k, dV)
                quad = quad + np.sum((bv @ Pk.T) * bv, axis=-1)
            worst_quad = max(worst_quad, float(np.max(np.abs(quad))))
    singular = worst_hu <= tol * scale and worst_quad <= tol * scale
    return ConditionReport("singularity", max(worst_hu, worst_quad), 0.0,
                           tol * scale,
                           "satisfied" if singular else "violated",
                           {"classification": "singular" if singular
                            else "non-singular",
                            "worst_hu": worst_hu, "worst_quadform": worst_quad,
                            "tolerance": tol * scale})


# ---------------------------------------------------------------------------
# pointwise second-order necessary condition


def check_pointwise_necessary(derivs: EvaluatedDerivatives, tau: float, v,
                              malliavin=None, allowance: float = 0.0
                              ) -> ConditionReport:
    """Three-term pointwise condition at time tau and control value v:

        <a_u Dv, S* Dv> + <b_u Dv, (grad S)* Dv> - <b_u Dv, S* grad ubar> <= 0,
        Dv = v - ubar(tau).

    The Malliavin terms require supplied data, or are certified zero when
    b_u Dv vanishes pathwise; otherwise the check refuses.  tau is snapped
    to the nearest grid node and the snap distance reported."""
    grid = derivs.grid
    pr = derivs.problem
    k = int(round(tau / grid.dt))
    k = min(max(k, 0), grid.M - 1)
    snap = abs(tau - grid.times[k])
    t = grid.times[k]
    Xk, Uk = derivs.X[:, k], derivs.U[:, k]
    dV = np.asarray(v, dtype=float)[None, :] - Uk
    a2dv = pr.drift_du(t, Xk, Uk, dV)
    b2dv = pr.diffusion_du(t, Xk, Uk, dV)
    # term 1: <a_u Dv, S* Dv> via the S pairing with Y replaced by a_u Dv
    term1 = derivs.s_pair(k, a2dv, dV)
    b2_scale = float(np.sqrt(np.max(np.sum(b2dv ** 2, axis=-1))))
    if malliavin is not None:
        grad_S, grad_u = malliavin
        term2 = np.sum(b2dv * np.einsum("ij,pj->pi", grad_S, dV), axis=-1)
        Sgu = derivs.s_matrix(k).T @ np.asarray(grad_u)
        term3 = -b2dv @ Sgu
        certified = "supplied"
    elif b2_scale <= 1e-12:
        term2 = term3 = 0.0
        certified = "zero (b_u(v - ubar) vanishes pathwise)"
    else:
        raise UnsupportedRegimeError(
            "pointwise check needs Malliavin data (grad S, grad ubar): "
            "supply them or use a point where b_u(v - ubar) = 0")
    lhs = term1 + term2 + term3
    est, se = _mean_stderr(lhs)
    return ConditionReport("pointwise_necessary", est, se, allowance,
                           _verdict_nonpositive(est, 3 * se + allowance),
                           {"tau": tau, "node": k, "snap_distance": snap,
                            "pathwise_max": float(np.max(lhs)),
                            "malliavin_terms": certified,
                            "lhs_paths": np.asarray(lhs)})


# ---------------------------------------------------------------------------
# Taylor-expansion consistency


def taylor_consistency(problem, grid: BrownianGrid, control, direction, x0,
                       eps_ladder, derivs: EvaluatedDerivatives,
                       dU) -> dict:
    """Residuals of the second-order cost expansion under common noise:

        residual(eps) = J(ubar + eps v) - J(ubar)
                        + eps * gap + (eps^2 / 2) * Lambda(v).

    For affine-quadratic problems the expansion is exact, so residuals must
    sit at Monte Carlo noise; a log-log slope is reported otherwise."""
    base = solve_state(problem, control, grid, x0, store="terminal")
    gap = first_order_gap(derivs, dU)
    Y = first_variation_values(problem, grid, derivs.X, derivs.U, dU)
    lam = lambda_full(derivs, dU, Y)
    lam_paths = lam.details.pop("paths", None)
    rows = []
    for eps in sorted(float(e) for e in eps_ladder):
        pert = solve_state(problem, ShiftedControl(control, direction, eps),
                           grid, x0, store="terminal")
        resid_paths = (pert.cost_paths - base.cost_paths
                       + eps * gap.estimate
                       + 0.5 * eps ** 2 * (lam_paths if lam_paths is not None
                                           else lam.estimate))
        est, se = _mean_stderr(resid_paths)
        floor = 1e-10 * (1.0 + abs(base.cost_mean))
        rows.append({"eps": eps, "residual": est, "stderr": se,
                     "residual_over_eps2": est / eps ** 2,
                     "at_noise": bool(abs(est) <= 3 * se + floor)})
    r = np.array([abs(row["residual"]) for row in rows])
    eps = np.array([row["eps"] for row in rows])
    slope = (float(np.polyfit(np.log(eps), np.log(np.maximum(r, 1e-300)), 1)[0])
             if len(rows) >= 3 and np.all(r > 1e-14) else None)
    return {"quantity": "taylor_consistency", "rungs": rows, "slope": slope,
            "gap": gap.to_dict(),
            "lambda": {k: vv for k, vv in lam.to_dict().items()
                       if k != "details"},
            "all_at_noise": all(row["at_noise"] for row in rows)}


# ---------------------------------------------------------------------------
# norms on grid controls


def control_grid_norm(values, dt: float, exponent: float = 2):
    """Power-mean grid norm of a deterministic node control (M, m):
    (sum_k dt |v_k|^p)^(1/p) with |.| the coefficient norm; exponent
    np.inf gives the sup over nodes."""
    mags = np.sqrt(np.sum(np.asarray(values) ** 2, axis=-1))
    if np.isinf(exponent):
        return float(np.max(mags))
    return float((dt * np.sum(mags ** exponent)) ** (1.0 / exponent))


# ---------------------------------------------------------------------------
# sufficiency certificate and quadratic growth probe


def sufficient_certificate(derivs: EvaluatedDerivatives, directions, rho: float,
                           exponent: float = 8, allowance: float = 0.0
                           ) -> ConditionReport:
    """Sampled-cone probe of the sufficiency condition
    Lambda(v) <= -2 rho ||v||^2 over the supplied admissible directions.

    The norm is the grid power-mean norm with the stated exponent (the
    L^8-based norm of the sufficiency theorem by default).  This samples a
    finite direction set; it is a probe, not a proof over the whole cone."""
    if len(directions) == 0:
        raise ValueError("certificate needs at least one direction")
    grid = derivs.grid
    worst = -np.inf
    worst_idx = -1
    rows = []
    for i, vals in enumerate(directions):
        vals = np.asarray(vals, dtype=float)
        nrm2 = control_grid_norm(vals, grid.dt, exponent) ** 2
        if nrm2 <= 0:
            continue
        dU = np.broadcast_to(vals, (grid.n_paths,) + vals.shape)
        lam = lambda_full(derivs, dU, allowance=allowance)
        ratio = lam.estimate / nrm2
        rows.append({"direction": i, "lambda": lam.estimate,
                     "stderr": lam.stderr, "norm_sq": nrm2, "ratio": ratio})
        if ratio > worst:
            worst, worst_idx = ratio, i
    verdict = ("satisfied" if worst <= -2.0 * rho + allowance else "violated")
    return ConditionReport("sufficient_certificate", worst, 0.0, allowance,
                           verdict,
                           {"rho": rho, "norm": f"grid L^{exponent} power mean",
                            "kind": "sampled-cone probe (not a proof over "
                                    "the full cone)",
                            "n_directions": len(rows),
                            "worst_direction": worst_idx, "rows": rows})


def quadratic_growth_probe(problem, grid: BrownianGrid, control, x0,
                           sigma: float, rho: float, n_samples: int,
                           seed: int = 0, allowance: float = 0.0
                           ) -> ConditionReport:
    """Min over sampled admissible u near ubar of
    (J(u) - J(ubar)) / ||u - ubar||^2 (L2 grid norm declared), compared to
    rho / 2; perturbations respect the sup-norm ball of radius sigma."""
    from .forward import GridControl  # local import to avoid cycle noise
    rng = np.random.Generator(np.random.Philox(
        key=np.array([seed, 0x6309], dtype=np.uint64)))
    base = solve_state(problem, control, grid, x0, store="terminal")
    tt = grid.times[:-1] / max(grid.T, 1e-300)
    ratios = []
    stderrs = []
    for i in range(n_samples):
        coef = rng.standard_normal((3, problem.control_dim))
        vals = np.stack([np.ones_like(tt), tt, tt ** 2], axis=1) @ coef
        sup = control_grid_norm(vals, grid.dt, np.inf)
        if sup <= 1e-14:
            continue  # degenerate draw: zero direction carries no information
        vals *= (sigma * float(rng.uniform(0.1, 1.0))) / sup
        vals = problem.control_set.project(vals)
        nrm2 = control_grid_norm(vals, grid.dt, 2) ** 2
        if nrm2 <= 1e-20:
            continue
        pert = solve_state(problem, ShiftedControl(control, GridControl(vals), 1.0),
                           grid, x0, store="terminal")
        diff = pert.cost_paths - base.cost_paths
        est, se = _mean_stderr(diff)
        ratios.append(est / nrm2)
        stderrs.append(se / nrm2)
    ratios = np.asarray(ratios)
    i_min = int(np.argmin(ratios))
    est = float(ratios[i_min])
    se = float(stderrs[i_min])
    verdict = ("satisfied" if est >= 0.5 * rho - 3 * se - allowance
               else "violated")
    return ConditionReport("quadratic_growth_probe", est, se, allowance,
                           verdict,
                           {"rho": rho, "sigma": sigma,
                            "n_samples": int(ratios.size),
                            "norm": "grid L^2, coefficient norm",
                            "min_ratio": est, "ratios": ratios})
