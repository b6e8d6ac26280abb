"""Forward dynamics: state simulation and first/second variations.

Time stepping is the exponential scheme
    x_{k+1} = e^{A dt} (x_k + a(t_k, x_k, u_k) dt + b(t_k, x_k, u_k) dW_k),
which treats the stiff generator exactly and evaluates coefficients at the
left endpoint.  The variational equations are propagated with the same
scheme and the same increments, so they are the exact parameter
derivatives of the discrete state map.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .noise import BrownianGrid
from .spectral import semigroup_factor


class BlowUpError(RuntimeError):
    """Simulation produced non-finite values; carries the first bad node."""

    def __init__(self, step: int, t: float):
        super().__init__(f"non-finite state at step {step} (t = {t:.6g})")
        self.step = step
        self.t = t


# ---------------------------------------------------------------------------
# controls


class Control:
    """Adapted control rule: value(t, k, X, W) -> (n_paths, m) coefficients.

    X is the current state batch and W the current Brownian value per path,
    so feedback and noise-dependent rules are both expressible.
    """

    def value(self, t, k, X, W):
        raise NotImplementedError


class ZeroControl(Control):
    def __init__(self, m: int):
        self.m = m

    def value(self, t, k, X, W):
        return np.zeros((X.shape[0], self.m))


class GridControl(Control):
    """Deterministic open-loop control given by node values, shape (M, m)
    (or (M+1, m); the terminal node is never used by the scheme)."""

    def __init__(self, values: np.ndarray):
        self.values = np.asarray(values, dtype=float)

    def value(self, t, k, X, W):
        return np.broadcast_to(self.values[k], (X.shape[0],) + self.values.shape[1:])


class RuleControl(Control):
    """Control from a callable rule(t, X, W) -> (n_paths, m)."""

    def __init__(self, rule):
        self.rule = rule

    def value(self, t, k, X, W):
        return self.rule(t, X, W)


class HeatOptimalControl(Control):
    """Closed-form optimal control of the heat builtin: u1 = f(t), u2 = 0."""

    def __init__(self, oracle):
        self.oracle = oracle

    def value(self, t, k, X, W):
        n = self.oracle.n_modes
        U = np.zeros((X.shape[0], 2 * n))
        U[:, :n] = self.oracle.control_u1(t, W)
        return U


class ShiftedControl(Control):
    """base + eps * direction; keeps common-random-number ladders trivial."""

    def __init__(self, base: Control, direction: Control, eps: float):
        self.base = base
        self.direction = direction
        self.eps = eps

    def value(self, t, k, X, W):
        return self.base.value(t, k, X, W) + self.eps * self.direction.value(t, k, X, W)


class ProjectedControl(Control):
    """Project another control onto the problem's control region each step;
    counts how many node evaluations were actually clipped."""

    def __init__(self, base: Control, control_set):
        self.base = base
        self.control_set = control_set
        self.clip_events = 0

    def value(self, t, k, X, W):
        raw = self.base.value(t, k, X, W)
        proj = self.control_set.project(raw)
        if np.max(np.abs(proj - raw)) > 1e-12:
            self.clip_events += 1
        return proj


# ---------------------------------------------------------------------------
# state simulation


@dataclass
class StateResult:
    """Simulation output.  `X` is (n_paths, M+1, d) when store='full',
    (n_paths, d) terminal values when store='terminal'.  Controls are kept
    only under store='full' with store_controls=True."""

    X: np.ndarray
    cost_paths: Optional[np.ndarray]
    store: str
    U: Optional[np.ndarray] = None

    @property
    def terminal(self) -> np.ndarray:
        return self.X if self.store == "terminal" else self.X[:, -1]

    @property
    def cost_mean(self) -> float:
        return float(np.mean(self.cost_paths))

    @property
    def cost_stderr(self) -> float:
        n = self.cost_paths.size
        return float(np.std(self.cost_paths, ddof=1) / np.sqrt(n)) if n > 1 else 0.0


def _check_finite(X, k, t):
    if not np.all(np.isfinite(X)):
        raise BlowUpError(k, t)


# paths are simulated in slabs of this many at a time: the per-step working
# set then stays cache-resident, which is several times faster than sweeping
# all paths at once, and the results are bit-identical (paths are independent)
PATH_SLAB = 2048


def solve_state(problem, control: Control, grid: BrownianGrid, x0,
                store: str = "full", with_cost: bool = True,
                store_controls: bool = False) -> StateResult:
    """Exponential-scheme state simulation over all paths of the grid."""
    if store not in ("full", "terminal"):
        raise ValueError("store must be 'full' or 'terminal'")
    dt = grid.dt
    E = semigroup_factor(problem.lam, dt)
    x0 = np.asarray(x0, dtype=float)
    n_paths = grid.n_paths
    cost = np.zeros(n_paths) if with_cost else None
    keep = store == "full"
    Xs = np.empty((n_paths, grid.M + 1, problem.dim)) if keep else None
    XT = None if keep else np.empty((n_paths, problem.dim))
    Us = (np.empty((n_paths, grid.M, problem.control_dim))
          if keep and store_controls else None)
    for lo in range(0, n_paths, PATH_SLAB):
        sl = slice(lo, min(lo + PATH_SLAB, n_paths))
        n_sl = sl.stop - sl.start
        X = np.broadcast_to(x0, (n_sl, problem.dim)).copy()
        W = np.zeros(n_sl)
        # step-major copy: the k-th step's increments are then contiguous
        incT = np.ascontiguousarray(grid.increments[sl].T)
        if keep:
            Xs[sl, 0] = X
        work = np.empty((n_sl, problem.dim))
        for k in range(grid.M):
            t = k * dt
            U = control.value(t, k, X, W)
            a = problem.drift(t, X, U)
            b = problem.diffusion(t, X, U)
            if with_cost:
                cost[sl] += problem.cost_g(t, X, U) * dt
            np.multiply(a, dt, out=work)
            X += work
            np.multiply(b, incT[k][:, None], out=work)
            X += work
            X *= E
            if (k & 63) == 63:
                # flush near-underflow entries: fast-decaying modes reach
                # subnormal magnitudes, where arithmetic is ~100x slower
                np.multiply(X, np.abs(X) > 1e-250, out=X)
            _check_finite(X, k + 1, t + dt)
            W = W + incT[k]
            if keep:
                Xs[sl, k + 1] = X
                if Us is not None:
                    Us[sl, k] = U
        if with_cost:
            cost[sl] += problem.term_h(X)
        if not keep:
            XT[sl] = X
    return StateResult(X=Xs if keep else XT, cost_paths=cost, store=store, U=Us)


def objective(problem, control: Control, grid: BrownianGrid, x0):
    """Monte Carlo objective value: (mean, stderr) over the grid's paths."""
    res = solve_state(problem, control, grid, x0, store="terminal")
    return res.cost_mean, res.cost_stderr


# ---------------------------------------------------------------------------
# variational equations (co-simulated with the nominal state)


def solve_first_variation(problem, control: Control, direction: Control,
                          grid: BrownianGrid, x0, store: str = "full"):
    """Nominal state and its first control-variation y in direction v.

    Returns (state_result, y) with y shaped like the state storage; y is the
    exact d/d(eps) at eps = 0 of the discrete state map under control + eps v.
    """
    dt = grid.dt
    E = semigroup_factor(problem.lam, dt)
    x0 = np.asarray(x0, dtype=float)
    X = np.broadcast_to(x0, (grid.n_paths, problem.dim)).copy()
    Y = np.zeros_like(X)
    W = np.zeros(grid.n_paths)
    cost = np.zeros(grid.n_paths)
    keep = store == "full"
    Xs = np.empty((grid.n_paths, grid.M + 1, problem.dim)) if keep else None
    Ys = np.empty_like(Xs) if keep else None
    if keep:
        Xs[:, 0], Ys[:, 0] = X, Y
    for k in range(grid.M):
        t = k * dt
        dW = grid.increments[:, k][:, None]
        U = control.value(t, k, X, W)
        V = direction.value(t, k, X, W)
        cost += problem.cost_g(t, X, U) * dt
        a = problem.drift(t, X, U)
        b = problem.diffusion(t, X, U)
        ya = problem.drift_dx(t, X, U, Y) + problem.drift_du(t, X, U, V)
        yb = problem.diffusion_dx(t, X, U, Y) + problem.diffusion_du(t, X, U, V)
        X_new = E * (X + a * dt + b * dW)
        Y = E * (Y + ya * dt + yb * dW)
        X = X_new
        if (k & 63) == 63:
            np.multiply(X, np.abs(X) > 1e-250, out=X)
            np.multiply(Y, np.abs(Y) > 1e-250, out=Y)
        _check_finite(X, k + 1, t + dt)
        W = W + grid.increments[:, k]
        if keep:
            Xs[:, k + 1], Ys[:, k + 1] = X, Y
    cost += problem.term_h(X)
    state = StateResult(X=Xs if keep else X, cost_paths=cost, store=store)
    return state, (Ys if keep else Y)


def solve_second_variation(problem, control: Control, direction: Control,
                           grid: BrownianGrid, x0, store: str = "full"):
    """Nominal state with first (y) and second (z) control-variations.

    z is the exact second eps-derivative of the discrete state map, driven by
    a_x z + a_xx(y,y) + 2 a_xu(y,v) + a_uu(v,v) and the diffusion analogue.
    """
    dt = grid.dt
    E = semigroup_factor(problem.lam, dt)
    x0 = np.asarray(x0, dtype=float)
    X = np.broadcast_to(x0, (grid.n_paths, problem.dim)).copy()
    Y = np.zeros_like(X)
    Z = np.zeros_like(X)
    W = np.zeros(grid.n_paths)
    keep = store == "full"
    Xs = np.empty((grid.n_paths, grid.M + 1, problem.dim)) if keep else None
    Ys = np.empty_like(Xs) if keep else None
    Zs = np.empty_like(Xs) if keep else None
    if keep:
        Xs[:, 0], Ys[:, 0], Zs[:, 0] = X, Y, Z
    for k in range(grid.M):
        t = k * dt
        dW = grid.increments[:, k][:, None]
        U = control.value(t, k, X, W)
        V = direction.value(t, k, X, W)
        a = problem.drift(t, X, U)
        b = problem.diffusion(t, X, U)
        ya = problem.drift_dx(t, X, U, Y) + problem.drift_du(t, X, U, V)
        yb = problem.diffusion_dx(t, X, U, Y) + problem.diffusion_du(t, X, U, V)
        za = (problem.drift_dx(t, X, U, Z) + problem.drift_dxx(t, X, U, Y, Y)
              + 2.0 * problem.drift_dxu(t, X, U, Y, V)
              + problem.drift_duu(t, X, U, V, V))
        zb = (problem.diffusion_dx(t, X, U, Z) + problem.diffusion_dxx(t, X, U, Y, Y)
              + 2.0 * problem.diffusion_dxu(t, X, U, Y, V)
              + problem.diffusion_duu(t, X, U, V, V))
        X_new = E * (X + a * dt + b * dW)
        Y_new = E * (Y + ya * dt + yb * dW)
        Z = E * (Z + za * dt + zb * dW)
        X, Y = X_new, Y_new
        if (k & 63) == 63:
            np.multiply(X, np.abs(X) > 1e-250, out=X)
            np.multiply(Y, np.abs(Y) > 1e-250, out=Y)
            np.multiply(Z, np.abs(Z) > 1e-250, out=Z)
        _check_finite(X, k + 1, t + dt)
        W = W + grid.increments[:, k]
        if keep:
            Xs[:, k + 1], Ys[:, k + 1], Zs[:, k + 1] = X, Y, Z
    return (Xs if keep else X), (Ys if keep else Y), (Zs if keep else Z)


# ---------------------------------------------------------------------------
# Taylor-remainder measurement for the variational expansion


def variational_remainders(problem, control: Control, direction: Control,
                           grid: BrownianGrid, x0, eps_list) -> dict:
    """Terminal remainders of the first/second variational expansions.

    Under common increments,
      R1(eps) = || x^eps(T) - x(T) - eps y(T) ||_rms
      R2(eps) = || x^eps(T) - x(T) - eps y(T) - eps^2/2 z(T) ||_rms
    (root-mean-square over paths of the coefficient norm).  Log-log slopes
    are fitted over the ladder; identically-zero remainders (affine
    dynamics) are flagged instead of fitted.
    """
    eps_list = sorted(float(e) for e in eps_list)
    if len(eps_list) < 3:
        raise ValueError("need at least 3 epsilon values for a slope fit")
    X, Y, Z = solve_second_variation(problem, control, direction, grid, x0,
                                     store="terminal")
    r1, r2 = [], []
    for eps in eps_list:
        pert = solve_state(problem, ShiftedControl(control, direction, eps),
                           grid, x0, store="terminal", with_cost=False)
        diff = pert.X - X
        d1 = diff - eps * Y
        d2 = d1 - 0.5 * eps ** 2 * Z
        r1.append(float(np.sqrt(np.mean(np.sum(d1 * d1, axis=-1)))))
        r2.append(float(np.sqrt(np.mean(np.sum(d2 * d2, axis=-1)))))
    r1 = np.array(r1)
    r2 = np.array(r2)
    scale = float(np.sqrt(np.mean(np.sum(X * X, axis=-1)))) or 1.0
    floor = 1e-12 * scale

    def fit(r):
        if np.all(r < floor):
            return None
        return float(np.polyfit(np.log(eps_list), np.log(np.maximum(r, 1e-300)), 1)[0])

    return {"eps": list(eps_list), "r1": r1.tolist(), "r2": r2.tolist(),
            "slope1": fit(r1), "slope2": fit(r2),
            "r1_zero": bool(np.all(r1 < floor)), "r2_zero": bool(np.all(r2 < floor)),
            "zero_floor": floor}
