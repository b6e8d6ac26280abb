"""Control-problem definitions with derivative accessors.

A problem bundles the generator A, drift a(t,x,u), diffusion b(t,x,u),
running cost g(t,x,u), terminal cost h(x) and the control region, all on
the sine-basis truncation.  Derivative contracts are directional and
vectorized over arbitrary leading batch axes.

Built-ins: the two-component controlled heat system with its closed-form
optimal control, linear-quadratic instances, and a nonlinear toy used for
Taylor-remainder rate measurements.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np

from .spectral import (DimensionError, dirichlet_laplacian_modes, h1_weights,
                       triple_sine_tensor)


class ValidationError(ValueError):
    """Problem data violates a structural requirement."""


# ---------------------------------------------------------------------------
# control regions


@dataclass(frozen=True)
class ControlSet:
    """Control region descriptor: full space, coefficient box, or weighted ball.

    `block` restricts box/ball constraints to a slice of the control vector
    (e.g. only the second component of a two-component control).
    """

    kind: str = "full"  # full | box | ball
    lo: float = -np.inf
    hi: float = np.inf
    radius: float = np.inf
    weights: Optional[np.ndarray] = None
    block: Optional[slice] = None

    def project(self, U: np.ndarray) -> np.ndarray:
        if self.kind == "full":
            return U
        U = np.array(U, copy=True)
        sl = self.block if self.block is not None else slice(None)
        if self.kind == "box":
            U[..., sl] = np.clip(U[..., sl], self.lo, self.hi)
            return U
        if self.kind == "ball":
            V = U[..., sl]
            w = self.weights if self.weights is not None else np.ones(V.shape[-1])
            nrm = np.sqrt(np.sum(w * V * V, axis=-1, keepdims=True))
            scale = np.where(nrm > self.radius, self.radius / np.maximum(nrm, 1e-300), 1.0)
            U[..., sl] = V * scale
            return U
        raise ValidationError(f"unknown control set kind {self.kind!r}")

    def contains(self, U: np.ndarray, tol: float = 1e-9) -> bool:
        return bool(np.max(np.abs(self.project(U) - U)) <= tol)


# ---------------------------------------------------------------------------
# generic problem interface


def _check_symmetric(name: str, A: Optional[np.ndarray], tol: float = 1e-12):
    if A is None:
        return
    scale = np.max(np.abs(A)) or 1.0
    if np.max(np.abs(A - A.T)) > tol * scale:
        raise ValidationError(f"{name} must be symmetric")


class Problem:
    """Interface shared by all problem definitions.

    All contracts accept batched states X (..., d), controls U (..., m)
    and directions of matching shape; `t` is a scalar or broadcastable
    array.  They must be re-entrant (no hidden mutable state).
    """

    lam: np.ndarray          # generator eigenvalues, shape (d,)
    dim: int                 # state dimension d
    control_dim: int         # control dimension m
    n_modes: int
    n_components: int
    control_set: ControlSet
    state_weights: np.ndarray     # H1-equivalent norm weights on state coeffs
    control_weights: np.ndarray   # norm weights on control coeffs
    norm_note: str = "plain coefficient l2 norm"
    label: str = "problem"
    is_affine: bool = False

    # dynamics -------------------------------------------------------------
    def drift(self, t, X, U):
        raise NotImplementedError

    def diffusion(self, t, X, U):
        raise NotImplementedError

    def drift_dx(self, t, X, U, Y):
        raise NotImplementedError

    def drift_du(self, t, X, U, V):
        raise NotImplementedError

    def diffusion_dx(self, t, X, U, Y):
        raise NotImplementedError

    def diffusion_du(self, t, X, U, V):
        raise NotImplementedError

    # adjoint (transpose) actions on a costate K in H ----------------------
    def drift_dx_T(self, t, X, U, K):
        raise NotImplementedError

    def drift_du_T(self, t, X, U, K):
        raise NotImplementedError

    def diffusion_dx_T(self, t, X, U, K):
        raise NotImplementedError

    def diffusion_du_T(self, t, X, U, K):
        raise NotImplementedError

    # second derivatives, as bilinear maps into H --------------------------
    def drift_dxx(self, t, X, U, Y1, Y2):
        raise NotImplementedError

    def drift_dxu(self, t, X, U, Y, V):
        raise NotImplementedError

    def drift_duu(self, t, X, U, V1, V2):
        raise NotImplementedError

    def diffusion_dxx(self, t, X, U, Y1, Y2):
        raise NotImplementedError

    def diffusion_dxu(self, t, X, U, Y, V):
        raise NotImplementedError

    def diffusion_duu(self, t, X, U, V1, V2):
        raise NotImplementedError

    # cost -----------------------------------------------------------------
    def cost_g(self, t, X, U):
        raise NotImplementedError

    def cost_g_dx(self, t, X, U, Y):
        raise NotImplementedError

    def cost_g_du(self, t, X, U, V):
        raise NotImplementedError

    def cost_g_dxx(self, t, X, U, Y1, Y2):
        raise NotImplementedError

    def cost_g_dxu(self, t, X, U, Y, V):
        raise NotImplementedError

    def cost_g_duu(self, t, X, U, V1, V2):
        raise NotImplementedError

    def cost_g_dx_vec(self, t, X, U):
        """Gradient of g in x as an H coefficient vector."""
        raise NotImplementedError

    def cost_g_du_vec(self, t, X, U):
        """Gradient of g in u as a control coefficient vector (pairing form)."""
        raise NotImplementedError

    def term_h(self, X):
        raise NotImplementedError

    def term_h_dx_vec(self, X):
        raise NotImplementedError

    def term_h_dxx_mat(self):
        """Terminal Hessian as a (d, d) matrix (state-independent builtins)."""
        raise NotImplementedError


# ---------------------------------------------------------------------------
# affine dynamics, quadratic cost (optionally with a quadratic diffusion term)


def _zeros_like_lead(X, m):
    return np.zeros(X.shape[:-1] + (m,))


class AffineProblem(Problem):
    """a = B1 x + C1 u + beta(t), b = B2 x + C2 u + gamma(t) [+ quad(u)],
    g = x.Rx/2 + x.Mu + u.Nu/2, h = x.Gx/2.

    The optional `quad` tensor adds sum_ij quad[k,i,j] u_i u_j to the
    diffusion (pointwise squares under spectral truncation); with it the
    diffusion is quadratic in u while everything else stays affine.
    """

    is_affine = True

    def __init__(self, lam, control_dim, *, n_modes, n_components=1,
                 B1=None, C1=None, B2=None, C2=None, beta=None, gamma=None,
                 R=None, M=None, N=None, G=None, quad=None,
                 control_set=None, state_weights=None, control_weights=None,
                 norm_note=None, label="affine"):
        self.lam = np.asarray(lam, dtype=float)
        self.dim = self.lam.size
        self.control_dim = int(control_dim)
        self.n_modes = n_modes
        self.n_components = n_components
        d, m = self.dim, self.control_dim
        for name, A, shape in (("B1", B1, (d, d)), ("C1", C1, (d, m)),
                               ("B2", B2, (d, d)), ("C2", C2, (d, m)),
                               ("R", R, (d, d)), ("M", M, (d, m)),
                               ("N", N, (m, m)), ("G", G, (d, d))):
            if A is not None and np.asarray(A).shape != shape:
                raise ValidationError(f"{name} must have shape {shape}")
        _check_symmetric("R", R)
        _check_symmetric("N", N)
        _check_symmetric("G", G)
        self.B1 = None if B1 is None else np.asarray(B1, dtype=float)
        self.C1 = None if C1 is None else np.asarray(C1, dtype=float)
        self.B2 = None if B2 is None else np.asarray(B2, dtype=float)
        self.C2 = None if C2 is None else np.asarray(C2, dtype=float)
        self.beta = beta
        self.gamma = gamma
        self.R = None if R is None else np.asarray(R, dtype=float)
        self.M = None if M is None else np.asarray(M, dtype=float)
        self.N = None if N is None else np.asarray(N, dtype=float)
        self.G = None if G is None else np.asarray(G, dtype=float)
        self.quad = None if quad is None else np.asarray(quad, dtype=float)
        if self.quad is not None and self.quad.shape != (d, m, m):
            raise ValidationError(f"quad tensor must have shape {(d, m, m)}")
        if self.quad is not None:
            # control columns the tensor actually touches; lets the hot loop
            # skip the einsum when those control components are all zero
            self._quad_cols_i = np.any(self.quad != 0, axis=(0, 2))
            self._quad_cols_j = np.any(self.quad != 0, axis=(0, 1))
        self.control_set = control_set or ControlSet()
        self.state_weights = (np.ones(d) if state_weights is None
                              else np.asarray(state_weights, dtype=float))
        self.control_weights = (np.ones(m) if control_weights is None
                                else np.asarray(control_weights, dtype=float))
        self.norm_note = norm_note or Problem.norm_note
        self.label = label

    # --- dynamics
    def drift(self, t, X, U):
        out = None
        if self.B1 is not None:
            out = X @ self.B1.T
        if self.C1 is not None:
            term = U @ self.C1.T
            out = term if out is None else out + term
        if self.beta is not None:
            term = np.broadcast_to(self.beta(t), X.shape[:-1] + (self.dim,))
            out = term.copy() if out is None else out + term
        if out is None:
            out = np.zeros(np.broadcast_shapes(X.shape[:-1], U.shape[:-1])
                           + (self.dim,))
        return out

    def _quad_term(self, U, V=None):
        # quad(U, V); V defaults to U.  Skips work when the inputs are zero.
        if self.quad is None:
            return 0.0
        V = U if V is None else V
        if not (np.any(U[..., self._quad_cols_i]) and np.any(V[..., self._quad_cols_j])):
            return 0.0
        return np.einsum("kij,...i,...j->...k", self.quad, U, V)

    def diffusion(self, t, X, U):
        out = None
        if self.B2 is not None:
            out = X @ self.B2.T
        if self.C2 is not None:
            term = U @ self.C2.T
            out = term if out is None else out + term
        if self.gamma is not None:
            term = np.broadcast_to(self.gamma(t), X.shape[:-1] + (self.dim,))
            out = term.copy() if out is None else out + term
        q = self._quad_term(U)
        if np.ndim(q) or q:
            out = q if out is None else out + q
        if out is None:
            out = np.zeros(np.broadcast_shapes(X.shape[:-1], U.shape[:-1])
                           + (self.dim,))
        return out

    def drift_dx(self, t, X, U, Y):
        return Y @ self.B1.T if self.B1 is not None else np.zeros_like(Y)

    def drift_du(self, t, X, U, V):
        if self.C1 is None:
            return _zeros_like_lead(V, self.dim)
        return V @ self.C1.T

    def diffusion_dx(self, t, X, U, Y):
        return Y @ self.B2.T if self.B2 is not None else np.zeros_like(Y)

    def diffusion_du(self, t, X, U, V):
        out = V @ self.C2.T if self.C2 is not None else _zeros_like_lead(V, self.dim)
        q = self._quad_term(U, V)
        if np.ndim(q) or q:
            out = out + 2.0 * q
        return out

    def drift_dx_T(self, t, X, U, K):
        return K @ self.B1 if self.B1 is not None else np.zeros_like(K)

    def drift_du_T(self, t, X, U, K):
        if self.C1 is None:
            return _zeros_like_lead(K, self.control_dim)
        return K @ self.C1

    def diffusion_dx_T(self, t, X, U, K):
        return K @ self.B2 if self.B2 is not None else np.zeros_like(K)

    def diffusion_du_T(self, t, X, U, K):
        out = K @ self.C2 if self.C2 is not None else _zeros_like_lead(K, self.control_dim)
        if self.quad is not None and np.any(U[..., self._quad_cols_j]) and np.any(K):
            out = out + 2.0 * np.einsum("kij,...k,...j->...i", self.quad, K, U)
        return out

    # --- second derivatives (only the quad diffusion term survives)
    def drift_dxx(self, t, X, U, Y1, Y2):
        return np.zeros_like(Y1)

    def drift_dxu(self, t, X, U, Y, V):
        return np.zeros_like(Y)

    def drift_duu(self, t, X, U, V1, V2):
        return _zeros_like_lead(V1, self.dim)

    def diffusion_dxx(self, t, X, U, Y1, Y2):
        return np.zeros_like(Y1)

    def diffusion_dxu(self, t, X, U, Y, V):
        return np.zeros_like(Y)

    def diffusion_duu(self, t, X, U, V1, V2):
        if self.quad is None:
            return _zeros_like_lead(V1, self.dim)
        return 2.0 * np.einsum("kij,...i,...j->...k", self.quad, V1, V2)

    # --- cost
    def cost_g(self, t, X, U):
        out = np.zeros(np.broadcast_shapes(X.shape[:-1], U.shape[:-1]))
        if self.R is not None:
            out = out + 0.5 * np.einsum("...i,ij,...j->...", X, self.R, X)
        if self.M is not None:
            out = out + np.einsum("...i,ij,...j->...", X, self.M, U)
        if self.N is not None:
            out = out + 0.5 * np.einsum("...i,ij,...j->...", U, self.N, U)
        return out

    def cost_g_dx(self, t, X, U, Y):
        return np.einsum("...i,...i->...", self.cost_g_dx_vec(t, X, U), Y)

    def cost_g_du(self, t, X, U, V):
        return np.einsum("...i,...i->...", self.cost_g_du_vec(t, X, U), V)

    def cost_g_dxx(self, t, X, U, Y1, Y2):
        if self.R is None:
            return np.zeros(np.broadcast_shapes(Y1.shape[:-1], Y2.shape[:-1]))
        return np.einsum("...i,ij,...j->...", Y1, self.R, Y2)

    def cost_g_dxu(self, t, X, U, Y, V):
        if self.M is None:
            return np.zeros(np.broadcast_shapes(Y.shape[:-1], V.shape[:-1]))
        return np.einsum("...i,ij,...j->...", Y, self.M, V)

    def cost_g_duu(self, t, X, U, V1, V2):
        if self.N is None:
            return np.zeros(np.broadcast_shapes(V1.shape[:-1], V2.shape[:-1]))
        return np.einsum("...i,ij,...j->...", V1, self.N, V2)

    def cost_g_dx_vec(self, t, X, U):
        out = np.zeros(np.broadcast_shapes(X.shape[:-1], U.shape[:-1]) + (self.dim,))
        if self.R is not None:
            out = out + X @ self.R.T
        if self.M is not None:
            out = out + U @ self.M.T
        return out

    def cost_g_du_vec(self, t, X, U):
        out = np.zeros(np.broadcast_shapes(X.shape[:-1], U.shape[:-1]) + (self.control_dim,))
        if self.M is not None:
            out = out + X @ self.M
        if self.N is not None:
            out = out + U @ self.N.T
        return out

    def term_h(self, X):
        if self.G is None:
            return np.zeros(X.shape[:-1])
        return 0.5 * np.einsum("...i,ij,...j->...", X, self.G, X)

    def term_h_dx_vec(self, X):
        if self.G is None:
            return np.zeros_like(X)
        return X @ self.G.T

    def term_h_dxx_mat(self):
        return np.zeros((self.dim, self.dim)) if self.G is None else self.G


# ---------------------------------------------------------------------------
# nonlinear toy: bounded smooth drift nonlinearity for rate measurements


class NonlinearToy(Problem):
    """Single-component problem with drift B1 x + C1 u + kappa sin(x) coeffwise.

    Affine-quadratic problems have exactly vanishing Taylor remainders, so
    rate tests need a genuinely nonlinear instance; the coefficientwise sine
    keeps all Lipschitz/growth bounds explicit (C_L = |B1| + |C1| + kappa).
    """

    is_affine = False

    def __init__(self, lam, *, n_modes, kappa=1.0, b1=0.2, c1=1.0, b2=0.3,
                 c2=0.2, n_cost=1.0, label="nonlinear_toy"):
        self.lam = np.asarray(lam, dtype=float)
        self.dim = self.lam.size
        self.control_dim = self.dim
        self.n_modes = n_modes
        self.n_components = 1
        self.kappa = float(kappa)
        self.b1, self.c1, self.b2, self.c2 = b1, c1, b2, c2
        self.n_cost = float(n_cost)
        self.control_set = ControlSet()
        self.state_weights = np.ones(self.dim)
        self.control_weights = np.ones(self.dim)
        self.label = label

    # dynamics
    def drift(self, t, X, U):
        return self.b1 * X + self.c1 * U + self.kappa * np.sin(X)

    def diffusion(self, t, X, U):
        return self.b2 * X + self.c2 * U

    def drift_dx(self, t, X, U, Y):
        return (self.b1 + self.kappa * np.cos(X)) * Y

    def drift_du(self, t, X, U, V):
        return self.c1 * V

    def diffusion_dx(self, t, X, U, Y):
        return self.b2 * Y

    def diffusion_du(self, t, X, U, V):
        return self.c2 * V

    def drift_dx_T(self, t, X, U, K):
        return (self.b1 + self.kappa * np.cos(X)) * K

    def drift_du_T(self, t, X, U, K):
        return self.c1 * K

    def diffusion_dx_T(self, t, X, U, K):
        return self.b2 * K

    def diffusion_du_T(self, t, X, U, K):
        return self.c2 * K

    def drift_dxx(self, t, X, U, Y1, Y2):
        return -self.kappa * np.sin(X) * Y1 * Y2

    def drift_dxu(self, t, X, U, Y, V):
        return np.zeros_like(Y)

    def drift_duu(self, t, X, U, V1, V2):
        return np.zeros_like(V1)

    def diffusion_dxx(self, t, X, U, Y1, Y2):
        return np.zeros_like(Y1)

    def diffusion_dxu(self, t, X, U, Y, V):
        return np.zeros_like(Y)

    def diffusion_duu(self, t, X, U, V1, V2):
        return np.zeros_like(V1)

    # cost: g = n_cost |u|^2 / 2, h = 0
    def cost_g(self, t, X, U):
        return 0.5 * self.n_cost * np.sum(U * U, axis=-1)

    def cost_g_dx(self, t, X, U, Y):
        return np.zeros(Y.shape[:-1])

    def cost_g_du(self, t, X, U, V):
        return self.n_cost * np.sum(U * V, axis=-1)

    def cost_g_dxx(self, t, X, U, Y1, Y2):
        return np.zeros(Y1.shape[:-1])

    def cost_g_dxu(self, t, X, U, Y, V):
        return np.zeros(Y.shape[:-1])

    def cost_g_duu(self, t, X, U, V1, V2):
        return self.n_cost * np.sum(V1 * V2, axis=-1)

    def cost_g_dx_vec(self, t, X, U):
        return np.zeros_like(X)

    def cost_g_du_vec(self, t, X, U):
        return self.n_cost * U

    def term_h(self, X):
        return np.zeros(X.shape[:-1])

    def term_h_dx_vec(self, X):
        return np.zeros_like(X)

    def term_h_dxx_mat(self):
        return np.zeros((self.dim, self.dim))


# ---------------------------------------------------------------------------
# heat example with closed-form oracle


@dataclass(frozen=True)
class HeatOracle:
    """Closed forms for the two-component heat system at its optimum.

    Per mode n with initial coefficient a_n:
      control  f_n(t)   = -(a_n / T) exp(-(n^2 pi^2 + 1/2) t + W(t))
      state    phi1_n(t) = a_n (1 - t/T) exp(-(n^2 pi^2 + 1/2) t + W(t))
      Riccati  pi_n(t)  = -exp(-(2 n^2 pi^2 - 1)(T - t))
    so phi1(T) = 0 on every path and pi_n < 0 on [0, T].
    """

    a_coeffs: np.ndarray
    T: float

    @property
    def n_modes(self) -> int:
        return self.a_coeffs.size

    @cached_property
    def _decay_rates(self) -> np.ndarray:
        return 0.5 - dirichlet_laplacian_modes(self.n_modes)  # n^2 pi^2 + 1/2

    def _mode_exp(self, t, W):
        t = np.asarray(t, dtype=float)[..., None]
        W = np.asarray(W, dtype=float)[..., None]
        # separable form: one small exp per path plus one per mode instead of
        # a full (paths, modes) exp.  The mode factor is clamped well above
        # the double underflow boundary: anything below e^-600 is zero for
        # every tolerance used here, and subnormal results would make
        # downstream arithmetic ~100x slower.
        decay = np.exp(np.maximum(-self._decay_rates * t, -600.0))
        return np.exp(W) * decay

    def control_u1(self, t, W) -> np.ndarray:
        """Optimal first-component control coefficients f_n(t); W = W(t)."""
        return -(self.a_coeffs / self.T) * self._mode_exp(t, W)

    def state_phi1(self, t, W) -> np.ndarray:
        """First-component state coefficients along the optimal pair."""
        t_arr = np.asarray(t, dtype=float)[..., None]
        return self.a_coeffs * (1.0 - t_arr / self.T) * self._mode_exp(t, W)

    def riccati_p11(self, t, mode: int) -> np.ndarray:
        """P_11 block eigenvalue for mode (1-based): strictly negative."""
        n2p2 = (mode * np.pi) ** 2
        return -np.exp(-(2.0 * n2p2 - 1.0) * (self.T - np.asarray(t, dtype=float)))


def heat_example(n_modes: int, a_coeffs, T: float):
    """Two-component controlled heat system of the worked example.

    State (phi1, phi2), control (u1, u2):
      d phi1 = (dxx phi1 + u1) dt + (phi1 + phi2) dW
      d phi2 = (dxx phi2) dt + u2^2 dW
    cost J = E |phi1(T)|^2 / 2, control region H x (unit H1 ball for u2).
    """
    a_coeffs = np.asarray(a_coeffs, dtype=float)
    if n_modes < 1 or a_coeffs.shape != (n_modes,):
        raise ValidationError("a_coeffs must have length n_modes")
    if T <= 0:
        raise ValidationError("T must be positive")
    d = 2 * n_modes
    m = 2 * n_modes
    lam = np.tile(dirichlet_laplacian_modes(n_modes), 2)
    I = np.eye(n_modes)
    Z = np.zeros((n_modes, n_modes))
    C1 = np.block([[I, Z], [Z, Z]])        # a = (u1, 0)
    B2 = np.block([[I, I], [Z, Z]])        # b linear part = (phi1 + phi2, 0)
    G = np.block([[I, Z], [Z, Z]])         # h = |phi1|^2 / 2
    T3 = triple_sine_tensor(n_modes)
    quad = np.zeros((d, m, m))
    quad[n_modes:, n_modes:, n_modes:] = T3  # second component gets u2^2
    w = h1_weights(n_modes)
    cs = ControlSet(kind="ball", radius=1.0, weights=w, block=slice(n_modes, m))
    prob = AffineProblem(
        lam, m, n_modes=n_modes, n_components=2,
        C1=C1, B2=B2, G=G, quad=quad, control_set=cs,
        state_weights=h1_weights(n_modes, 2), control_weights=h1_weights(n_modes, 2),
        norm_note="H1-equivalent weights (1 + n^2 pi^2) on sine coefficients",
        label="heat")
    return prob, HeatOracle(a_coeffs=a_coeffs, T=float(T))


def lq_example(B1, B2, C1, C2, R, M, N, lam, *, n_modes, n_components=1,
               G=None, label="lq") -> AffineProblem:
    """Linear-quadratic instance: dx = (Ax + B1 x + C1 u)dt + (B2 x + C2 u)dW,
    running cost (x.Rx + 2 x.Mu + u.Nu)/2, terminal cost x.Gx/2 (default 0)."""
    _check_symmetric("R", None if R is None else np.asarray(R))
    _check_symmetric("N", None if N is None else np.asarray(N))
    m = np.asarray(N).shape[0] if N is not None else np.asarray(C1).shape[1]
    return AffineProblem(lam, m, n_modes=n_modes, n_components=n_components,
                         B1=B1, C1=C1, B2=B2, C2=C2, R=R, M=M, N=N, G=G,
                         label=label)


def nonlinear_toy(n_modes: int = 4, kappa: float = 1.0, **kw) -> NonlinearToy:
    """Rate-test builtin: bounded smooth drift nonlinearity, mild generator."""
    lam = -np.arange(1.0, n_modes + 1)  # mildly stable; stiffness irrelevant here
    return NonlinearToy(lam, n_modes=n_modes, kappa=kappa, **kw)


# ---------------------------------------------------------------------------
# finite-difference consistency check of supplied derivatives


def fd_derivative_check(problem: Problem, n_points: int = 10, seed: int = 0,
                        tol_first: float = 1e-5, tol_second: float = 1e-3,
                        t_max: float = 1.0) -> dict:
    """Central finite differences vs supplied first/second derivatives.

    Probes random (t, x, u) points and random directions; returns a report
    with worst relative errors per block.  Non-fatal: the caller decides
    what to do with a failure.
    """
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0xFD], dtype=np.uint64)))
    d, m = problem.dim, problem.control_dim
    h = 1e-5
    worst = {}

    def rel(err, scale):
        return err / max(scale, 1e-8)

    def record(name, val):
        worst[name] = max(worst.get(name, 0.0), val)

    for _ in range(n_points):
        t = float(rng.uniform(0.0, t_max))
        X = rng.standard_normal(d)
        U = problem.control_set.project(rng.standard_normal(m) * 0.5)
        Y = rng.standard_normal(d)
        V = rng.standard_normal(m)
        sx = max(1.0, float(np.max(np.abs(X))))
        su = max(1.0, float(np.max(np.abs(U))))
        hx, hu = h * sx, h * su
        for name, f, df in (("a_x", problem.drift, problem.drift_dx),
                            ("b_x", problem.diffusion, problem.diffusion_dx)):
            fd = (f(t, X + hx * Y, U) - f(t, X - hx * Y, U)) / (2 * hx)
            an = df(t, X, U, Y)
            record(name, rel(np.max(np.abs(fd - an)), np.max(np.abs(an)) + 1.0))
        for name, f, df in (("a_u", problem.drift, problem.drift_du),
                            ("b_u", problem.diffusion, problem.diffusion_du)):
            fd = (f(t, X, U + hu * V) - f(t, X, U - hu * V)) / (2 * hu)
            an = df(t, X, U, V)
            record(name, rel(np.max(np.abs(fd - an)), np.max(np.abs(an)) + 1.0))
        fd = (problem.cost_g(t, X + hx * Y, U) - problem.cost_g(t, X - hx * Y, U)) / (2 * hx)
        record("g_x", rel(abs(fd - problem.cost_g_dx(t, X, U, Y)), abs(fd) + 1.0))
        fd = (problem.cost_g(t, X, U + hu * V) - problem.cost_g(t, X, U - hu * V)) / (2 * hu)
        record("g_u", rel(abs(fd - problem.cost_g_du(t, X, U, V)), abs(fd) + 1.0))
        fd = (problem.term_h(X + hx * Y) - problem.term_h(X - hx * Y)) / (2 * hx)
        an = float(np.sum(problem.term_h_dx_vec(X) * Y))
        record("h_x", rel(abs(fd - an), abs(fd) + 1.0))

        # second derivatives: second differences along directions
        h2 = 3e-4
        for name, f, d2 in (("a_xx", problem.drift, problem.drift_dxx),
                            ("b_xx", problem.diffusion, problem.diffusion_dxx)):
            fd = (f(t, X + h2 * Y, U) - 2 * f(t, X, U) + f(t, X - h2 * Y, U)) / h2 ** 2
            an = d2(t, X, U, Y, Y)
            record(name, rel(np.max(np.abs(fd - an)), np.max(np.abs(an)) + 1.0))
        for name, f, d2 in (("a_uu", problem.drift, problem.drift_duu),
                            ("b_uu", problem.diffusion, problem.diffusion_duu)):
            fd = (f(t, X, U + h2 * V) - 2 * f(t, X, U) + f(t, X, U - h2 * V)) / h2 ** 2
            an = d2(t, X, U, V, V)
            record(name, rel(np.max(np.abs(fd - an)), np.max(np.abs(an)) + 1.0))
        f0 = problem.cost_g(t, X, U)
        fd = (problem.cost_g(t, X + h2 * Y, U) - 2 * f0 + problem.cost_g(t, X - h2 * Y, U)) / h2 ** 2
        record("g_xx", rel(abs(fd - problem.cost_g_dxx(t, X, U, Y, Y)), abs(fd) + 1.0))
        fd = (problem.cost_g(t, X, U + h2 * V) - 2 * f0 + problem.cost_g(t, X, U - h2 * V)) / h2 ** 2
        record("g_uu", rel(abs(fd - problem.cost_g_duu(t, X, U, V, V)), abs(fd) + 1.0))
        # mixed x-u second derivatives via cross differences
        fpp = problem.cost_g(t, X + h2 * Y, U + h2 * V)
        fpm = problem.cost_g(t, X + h2 * Y, U - h2 * V)
        fmp = problem.cost_g(t, X - h2 * Y, U + h2 * V)
        fmm = problem.cost_g(t, X - h2 * Y, U - h2 * V)
        fd = (fpp - fpm - fmp + fmm) / (4 * h2 ** 2)
        record("g_xu", rel(abs(fd - problem.cost_g_dxu(t, X, U, Y, V)), abs(fd) + 1.0))
        for name, f, d2 in (("a_xu", problem.drift, problem.drift_dxu),
                            ("b_xu", problem.diffusion, problem.diffusion_dxu)):
            fd = (f(t, X + h2 * Y, U + h2 * V) - f(t, X + h2 * Y, U - h2 * V)
                  - f(t, X - h2 * Y, U + h2 * V) + f(t, X - h2 * Y, U - h2 * V)) / (4 * h2 ** 2)
            an = d2(t, X, U, Y, V)
            record(name, rel(np.max(np.abs(fd - an)), np.max(np.abs(an)) + 1.0))

    first = {k: v for k, v in worst.items() if k in
             ("a_x", "a_u", "b_x", "b_u", "g_x", "g_u", "h_x")}
    second = {k: v for k, v in worst.items() if k not in first}
    failures = sorted([k for k, v in first.items() if v > tol_first]
                      + [k for k, v in second.items() if v > tol_second])
    offenders = sorted(worst.items(), key=lambda kv: -kv[1])[:5]
    return {"passed": not failures, "failures": failures,
            "worst_first": first, "worst_second": second,
            "worst_offenders": offenders,
            "tol_first": tol_first, "tol_second": tol_second}


# ---------------------------------------------------------------------------
# builtin registry (used by the CLI)


def build_problem(name: str, *, n_modes: int, T: float, params: Optional[dict] = None):
    """Construct a builtin by name; returns (problem, oracle_or_None)."""
    params = dict(params or {})
    if name == "heat":
        a = params.get("a_coeffs")
        if a is None:
            a = [1.0 / (k + 1) ** 2 for k in range(n_modes)]
        prob, oracle = heat_example(n_modes, np.asarray(a, dtype=float)[:n_modes], T)
        return prob, oracle
    if name == "lq":
        lam = dirichlet_laplacian_modes(n_modes)
        d = n_modes
        rng = np.random.Generator(np.random.Philox(key=np.array(
            [int(params.get("block_seed", 7)), 0x10], dtype=np.uint64)))
        scale = float(params.get("scale", 0.5))
        B1 = scale * rng.standard_normal((d, d)) / np.sqrt(d)
        B2 = scale * rng.standard_normal((d, d)) / np.sqrt(d)
        C1 = np.eye(d)
        C2 = scale * rng.standard_normal((d, d)) / np.sqrt(d)
        Rh = rng.standard_normal((d, d)) / np.sqrt(d)
        R = float(params.get("r_scale", 1.0)) * (Rh + Rh.T) / 2
        M = float(params.get("m_scale", 0.3)) * rng.standard_normal((d, d)) / np.sqrt(d)
        N = np.eye(d) * float(params.get("nu", 1.0))
        return lq_example(B1, B2, C1, C2, R, M, N, lam, n_modes=n_modes), None
    if name == "lq_certificate":
        # N >= nu I, C2 = 0, R = M = 0: closed-form quadratic form instance
        lam = dirichlet_laplacian_modes(n_modes)
        d = n_modes
        nu = float(params.get("nu", 1.0))
        return lq_example(None, None, np.eye(d), None, None, None, nu * np.eye(d),
                          lam, n_modes=n_modes, label="lq_certificate"), None
    if name == "lq_indefinite":
        lam = dirichlet_laplacian_modes(n_modes)
        d = n_modes
        N = np.eye(d)
        N[0, 0] = -float(params.get("neg", 1.0))
        return lq_example(None, None, np.eye(d), None, None, None, N, lam,
                          n_modes=n_modes, label="lq_indefinite"), None
    if name == "toy":
        return nonlinear_toy(n_modes, kappa=float(params.get("kappa", 1.0))), None
    raise ValidationError(f"unknown builtin problem {name!r}")


BUILTIN_PROBLEMS = ("heat", "lq", "lq_certificate", "lq_indefinite", "toy")
