"""Spectral-basis arithmetic: eigenvalues, semigroup, inner products."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seeopt.spectral import (BlockOperator, DiagonalGenerator, DimensionError,
                             SpectralVec, dirichlet_laplacian_modes,
                             dirichlet_laplacian_spectrum, h1_weights, inner,
                             semigroup_apply, semigroup_factor,
                             triple_sine_tensor)


def test_laplacian_eigenvalues_closed_form():
    ev = dirichlet_laplacian_modes(5)
    expected = -np.array([1, 4, 9, 16, 25], dtype=float) * np.pi ** 2
    np.testing.assert_allclose(ev, expected, rtol=1e-15)


def test_laplacian_eigenvalue_ratios():
    ev = dirichlet_laplacian_modes(8)
    np.testing.assert_allclose(ev / ev[0], np.arange(1.0, 9.0) ** 2, rtol=1e-15)


def test_spectrum_tiles_components():
    gen = dirichlet_laplacian_spectrum(3, n_components=2)
    assert gen.dim == 6
    np.testing.assert_array_equal(gen.eigenvalues[:3], gen.eigenvalues[3:])


def test_semigroup_identity_at_zero_dt():
    gen = dirichlet_laplacian_spectrum(4)
    np.testing.assert_array_equal(semigroup_factor(gen, 0.0), np.ones(4))


def test_semigroup_accepts_bare_eigenvalue_array():
    lam = np.array([-1.0, -2.0])
    np.testing.assert_allclose(semigroup_factor(lam, 0.5), np.exp(lam * 0.5))


def test_semigroup_rejects_negative_dt():
    with pytest.raises(ValueError):
        semigroup_factor(dirichlet_laplacian_spectrum(2), -0.1)


def test_semigroup_composition_law():
    gen = dirichlet_laplacian_spectrum(6)
    s, t = 0.003, 0.001
    np.testing.assert_allclose(
        semigroup_factor(gen, s) * semigroup_factor(gen, t),
        semigroup_factor(gen, s + t), rtol=1e-14)


def test_semigroup_contraction():
    gen = dirichlet_laplacian_spectrum(6)
    v = SpectralVec(np.ones(6), 6)
    w = semigroup_apply(gen, 0.01, v)
    assert inner(w, w) < inner(v, v)
    assert np.all(semigroup_factor(gen, 0.01) < 1.0)


def test_semigroup_apply_matches_scalar_ode():
    # coefficientwise solution of c' = lambda c over one step
    gen = dirichlet_laplacian_spectrum(3)
    c0 = np.array([1.0, -2.0, 0.5])
    out = semigroup_apply(gen, 0.002, SpectralVec(c0, 3))
    np.testing.assert_allclose(out.coeffs, c0 * np.exp(gen.eigenvalues * 0.002),
                               rtol=1e-15)


def test_inner_is_parseval_dot():
    u = SpectralVec(np.array([1.0, 2.0]), 2)
    v = SpectralVec(np.array([3.0, -1.0]), 2)
    assert inner(u, v) == pytest.approx(1.0)


def test_inner_orthonormality_numerical():
    # <basis_i, basis_j> computed by quadrature equals the coefficient dot
    x = np.linspace(0.0, 1.0, 20001)
    for i in (1, 2, 3):
        for j in (1, 2, 3):
            fi = np.sqrt(2) * np.sin(i * np.pi * x)
            fj = np.sqrt(2) * np.sin(j * np.pi * x)
            q = np.trapezoid(fi * fj, x)
            assert q == pytest.approx(1.0 if i == j else 0.0, abs=1e-6)


def test_inner_dimension_mismatch():
    with pytest.raises(DimensionError):
        inner(SpectralVec(np.ones(2), 2), SpectralVec(np.ones(3), 3))


def test_spectral_vec_component_slicing():
    v = SpectralVec(np.arange(6.0), 3, n_components=2)
    np.testing.assert_array_equal(v.component(0), [0.0, 1.0, 2.0])
    np.testing.assert_array_equal(v.component(1), [3.0, 4.0, 5.0])


def test_spectral_vec_rejects_bad_shape():
    with pytest.raises(DimensionError):
        SpectralVec(np.ones(5), 3, n_components=2)


def test_spectral_vec_rejects_nonfinite():
    with pytest.raises(DimensionError):
        SpectralVec(np.array([1.0, np.nan]), 2)


def test_block_operator_apply_and_shape_check():
    op = BlockOperator(np.array([[1.0, 2.0], [0.0, 1.0], [1.0, 0.0]]))
    out = op.apply(SpectralVec(np.array([1.0, 1.0]), 2))
    np.testing.assert_array_equal(out, [3.0, 1.0, 1.0])
    with pytest.raises(DimensionError):
        op.apply(SpectralVec(np.ones(3), 3))


def test_h1_weights_values():
    w = h1_weights(3)
    np.testing.assert_allclose(
        w, 1.0 + np.array([1.0, 4.0, 9.0]) * np.pi ** 2, rtol=1e-15)
    assert np.all(np.diff(w) > 0)


def test_triple_sine_tensor_against_quadrature():
    n = 4
    T = triple_sine_tensor(n)
    x = np.linspace(0.0, 1.0, 40001)
    basis = np.sqrt(2) * np.sin(np.outer(np.arange(1, n + 1), np.pi * x))
    for k in range(n):
        for i in range(n):
            for j in range(n):
                q = np.trapezoid(basis[k] * basis[i] * basis[j], x)
                assert T[k, i, j] == pytest.approx(q, abs=1e-8), (k, i, j)


def test_triple_sine_tensor_symmetry():
    T = triple_sine_tensor(5)
    np.testing.assert_allclose(T, np.swapaxes(T, 1, 2), atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 0.02), st.floats(0.0, 0.02))
def test_semigroup_law_property(s, t):
    gen = dirichlet_laplacian_spectrum(4)
    np.testing.assert_allclose(
        semigroup_factor(gen, s) * semigroup_factor(gen, t),
        semigroup_factor(gen, s + t), rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3),
       st.lists(st.floats(-10, 10), min_size=3, max_size=3),
       st.floats(-5, 5), st.floats(-5, 5))
def test_inner_bilinearity_property(a, b, ca, cb):
    u, v = np.array(a), np.array(b)
    w = np.array([1.0, -2.0, 0.5])
    lhs = inner(SpectralVec(ca * u + cb * v, 3), SpectralVec(w, 3))
    rhs = (ca * inner(SpectralVec(u, 3), SpectralVec(w, 3))
           + cb * inner(SpectralVec(v, 3), SpectralVec(w, 3)))
    assert lhs == pytest.approx(rhs, abs=1e-9)
