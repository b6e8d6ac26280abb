"""Truncated Hilbert-space arithmetic in a Dirichlet sine eigenbasis.

States live in a truncation of H = L^2(0,1)^c spanned by the orthonormal
basis sqrt(2) sin(n pi x), n = 1..n_modes, per component.  Everything is
stored as flat coefficient vectors (component-major: entry c*n_modes + n),
which makes the generator diagonal and the semigroup exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """Shape mismatch between spectral objects."""


@dataclass(frozen=True)
class SpectralVec:
    """Element of the truncated state space: flat coefficient array."""

    coeffs: np.ndarray
    n_modes: int
    n_components: int = 1

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        object.__setattr__(self, "coeffs", c)
        if self.n_modes < 1 or self.n_components < 1:
            raise DimensionError("n_modes and n_components must be >= 1")
        if c.shape != (self.n_modes * self.n_components,):
            raise DimensionError(
                f"coeffs shape {c.shape} != ({self.n_modes * self.n_components},)"
            )
        if not np.all(np.isfinite(c)):
            raise DimensionError("coeffs must be finite")

    @property
    def dim(self) -> int:
        return self.n_modes * self.n_components

    def component(self, c: int) -> np.ndarray:
        return self.coeffs[c * self.n_modes : (c + 1) * self.n_modes]


@dataclass(frozen=True)
class DiagonalGenerator:
    """Diagonal generator A: eigenvalue per flat coefficient (units 1/time)."""

    eigenvalues: np.ndarray
    label: str = ""
    n_modes: int = 0
    n_components: int = 1

    def __post_init__(self):
        ev = np.asarray(self.eigenvalues, dtype=float)
        object.__setattr__(self, "eigenvalues", ev)
        if not np.all(np.isfinite(ev)):
            raise DimensionError("eigenvalues must be finite")
        if self.n_modes == 0:
            object.__setattr__(self, "n_modes", ev.size // self.n_components)
        if ev.size != self.n_modes * self.n_components:
            raise DimensionError("eigenvalue count inconsistent with shape")

    @property
    def dim(self) -> int:
        return self.eigenvalues.size


@dataclass(frozen=True)
class BlockOperator:
    """Dense operator between truncated spaces, stored in the sine basis."""

    matrix: np.ndarray
    n_out: int = 0
    n_in: int = 0

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        object.__setattr__(self, "matrix", m)
        if m.ndim != 2 or not np.all(np.isfinite(m)):
            raise DimensionError("matrix must be a finite 2-d array")
        if self.n_out == 0:
            object.__setattr__(self, "n_out", m.shape[0])
        if self.n_in == 0:
            object.__setattr__(self, "n_in", m.shape[1])
        if m.shape != (self.n_out, self.n_in):
            raise DimensionError("matrix shape inconsistent with declared sizes")

    def apply(self, v: SpectralVec) -> np.ndarray:
        if v.dim != self.n_in:
            raise DimensionError(f"operator expects dim {self.n_in}, got {v.dim}")
        return self.matrix @ v.coeffs


def dirichlet_laplacian_modes(n_modes: int) -> np.ndarray:
    """Eigenvalues -n^2 pi^2 of d^2/dx^2 on (0,1) with Dirichlet conditions."""
    n = np.arange(1, n_modes + 1, dtype=float)
    return -(n * np.pi) ** 2


def dirichlet_laplacian_spectrum(n_modes: int, n_components: int = 1) -> DiagonalGenerator:
    """Generator of the heat semigroup per component on the sine truncation."""
    if n_modes < 1 or n_components < 1:
        raise DimensionError("n_modes and n_components must be >= 1")
    ev = np.tile(dirichlet_laplacian_modes(n_modes), n_components)
    return DiagonalGenerator(ev, label="dirichlet_laplacian",
                             n_modes=n_modes, n_components=n_components)


def semigroup_factor(gen, dt: float) -> np.ndarray:
    """Coefficientwise multiplier e^{lambda dt}.

    Accepts a DiagonalGenerator or a bare eigenvalue array.
    """
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    ev = gen.eigenvalues if isinstance(gen, DiagonalGenerator) else np.asarray(gen)
    return np.exp(ev * dt)


def semigroup_apply(gen: DiagonalGenerator, dt: float, v: SpectralVec) -> SpectralVec:
    """Apply e^{A dt} to v (exact on the diagonal truncation)."""
    if gen.dim != v.dim:
        raise DimensionError(f"generator dim {gen.dim} != vector dim {v.dim}")
    return SpectralVec(semigroup_factor(gen, dt) * v.coeffs, v.n_modes, v.n_components)


def inner(u: SpectralVec, v: SpectralVec) -> float:
    """H inner product: Euclidean dot product of coefficients (Parseval)."""
    if u.dim != v.dim:
        raise DimensionError(f"dims differ: {u.dim} vs {v.dim}")
    return float(np.dot(u.coeffs, v.coeffs))


def h1_weights(n_modes: int, n_components: int = 1) -> np.ndarray:
    """Coefficient weights (1 + n^2 pi^2) realizing an equivalent H_0^1 norm.

    The equation only fixes the H_0^1 topology, not a particular inner
    product; this choice is declared in every report that uses it.
    """
    n = np.arange(1, n_modes + 1, dtype=float)
    return np.tile(1.0 + (n * np.pi) ** 2, n_components)


H1_NORM_CONVENTION = "sum_n (1 + n^2 pi^2) |c_n|^2 on sine coefficients"
L2_NORM_CONVENTION = "plain coefficient l2 norm (orthonormal sine basis)"


def triple_sine_tensor(n_modes: int) -> np.ndarray:
    """T[k, i, j] = integral_0^1 basis_k basis_i basis_j dx, basis_n = sqrt(2) sin(n pi x).

    Closed form via product-to-sum: the pointwise product of two basis
    elements projected back onto the basis.  Used for pointwise-quadratic
    nonlinearities (e.g. the square of a control) under spectral truncation.
    """

    def int_sin(k: int) -> float:
        # integral_0^1 sin(k pi x) dx, any integer k
        if k == 0:
            return 0.0
        if k < 0:
            return -int_sin(-k)
        return (1.0 - (-1.0) ** k) / (k * np.pi)

    T = np.zeros((n_modes, n_modes, n_modes))
    for i in range(1, n_modes + 1):
        for j in range(1, n_modes + 1):
            for k in range(1, n_modes + 1):
                # sin a sin b sin c = (sin(a+b-c)+sin(a-b+c)+sin(-a+b+c)-sin(a+b+c))/4
                s = (int_sin(i + j - k) + int_sin(i - j + k)
                     + int_sin(-i + j + k) - int_sin(i + j + k))
                T[k - 1, i - 1, j - 1] = 2.0 ** 1.5 * s / 4.0
    return T
