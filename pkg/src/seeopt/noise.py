"""Reproducible Brownian drivers on a uniform time grid.

One independent counter-based stream per Monte Carlo path: the increments
of path i are a pure function of (seed, i, step index), so any path can be
regenerated independently of scheduling and path count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NoiseConfigError(ValueError):
    """Invalid Brownian grid configuration."""


@dataclass(frozen=True)
class BrownianGrid:
    """Uniform-grid Brownian increments, one independent stream per path.

    increments[i, k] ~ N(0, T/M) is draw k of the Philox stream keyed
    (seed, i).  Grids obtained by coarsening a finer grid keep the parent
    seed and record the refinement factor in `derived_factor`.
    """

    T: float
    M: int
    n_paths: int
    seed: int
    increments: np.ndarray
    derived_factor: int = 1

    @property
    def dt(self) -> float:
        return self.T / self.M

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.M + 1)


def _path_increments(seed: int, path: int, M: int, dt: float) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, path], dtype=np.uint64)))
    return rng.standard_normal(M) * np.sqrt(dt)


def make_brownian(seed: int, n_paths: int, M: int, T: float) -> BrownianGrid:
    """Generate a reproducible Brownian grid: N(0, T/M) increments per path."""
    if M < 1:
        raise NoiseConfigError(f"M must be >= 1, got {M}")
    if T <= 0:
        raise NoiseConfigError(f"T must be positive, got {T}")
    if n_paths < 1:
        raise NoiseConfigError(f"n_paths must be >= 1, got {n_paths}")
    dt = T / M
    inc = np.empty((n_paths, M))
    for i in range(n_paths):
        inc[i] = _path_increments(int(seed), i, M, dt)
    return BrownianGrid(T=float(T), M=M, n_paths=n_paths, seed=int(seed), increments=inc)


def brownian_value(grid: BrownianGrid, path: int, k: int) -> float:
    """W(t_k) on a path: prefix sum of increments, W(t_0) = 0."""
    if not (0 <= path < grid.n_paths):
        raise IndexError(f"path {path} out of range [0, {grid.n_paths})")
    if not (0 <= k <= grid.M):
        raise IndexError(f"step {k} out of range [0, {grid.M}]")
    return float(np.sum(grid.increments[path, :k]))


def brownian_paths(grid: BrownianGrid) -> np.ndarray:
    """All node values W(t_k), shape (n_paths, M + 1)."""
    W = np.zeros((grid.n_paths, grid.M + 1))
    np.cumsum(grid.increments, axis=1, out=W[:, 1:])
    return W


def coarsen(grid: BrownianGrid, factor: int) -> BrownianGrid:
    """Aggregate increments onto a grid with M/factor steps (same paths).

    Couples runs across step counts: the coarse driver is the restriction
    of the fine one, so strong-error comparisons difference the same noise.
    """
    if factor < 1 or grid.M % factor != 0:
        raise NoiseConfigError(f"factor {factor} must divide M = {grid.M}")
    if factor == 1:
        return grid
    Mc = grid.M // factor
    inc = grid.increments.reshape(grid.n_paths, Mc, factor).sum(axis=2)
    return BrownianGrid(T=grid.T, M=Mc, n_paths=grid.n_paths, seed=grid.seed,
                        increments=inc, derived_factor=grid.derived_factor * factor)
