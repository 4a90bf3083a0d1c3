"""Maxwell-Stefan matrix: structure, pseudo-inverse and spectral constants."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mskin.errors import DegenerateInputError, DomainError, SolvabilityError
from mskin.ms_matrix import (
    build_ms_matrix,
    check_spectral_constants,
    estimate_spectral_constants,
    ms_matrix_batch,
    pinv_batch,
    project_off_kernel,
    solve_flux_force,
)


def _random_delta(rng, n):
    d = 0.5 + 1.5 * rng.random((n, n))
    return np.triu(d) + np.triu(d, 1).T


def test_two_species_examples():
    np.testing.assert_array_equal(build_ms_matrix([1.0, 1.0], 1.0).a, [[-1.0, 1.0], [1.0, -1.0]])
    np.testing.assert_array_equal(build_ms_matrix([2.0, 1.0], 1.0).a, [[-2.0, 2.0], [2.0, -2.0]])


def test_three_species_kernel_and_sign():
    rng = np.random.default_rng(3)
    c = rng.random(3) + 0.1
    A = build_ms_matrix(c, _random_delta(rng, 3))
    assert np.max(np.abs(A.a @ np.ones(3))) <= 1e-14
    assert np.max(np.linalg.eigvalsh(A.a)) <= 1e-12


def test_rejects_nonpositive_input():
    with pytest.raises(DomainError):
        build_ms_matrix([1.0, 0.0], 1.0)
    with pytest.raises(DomainError):
        build_ms_matrix([1.0, 1.0], [[1.0, -1.0], [-1.0, 1.0]])
    with pytest.raises(DomainError):
        build_ms_matrix([1.0, 1.0, 1.0], [[1, 1, 2], [1, 1, 1], [1, 1, 1]])


@given(
    c=arrays(float, 4, elements=st.floats(0.05, 5.0)),
    x=arrays(float, 4, elements=st.floats(-10.0, 10.0)),
    seed=st.integers(0, 10_000),
)
def test_matrix_properties(c, x, seed):
    d = _random_delta(np.random.default_rng(seed), 4)
    a = ms_matrix_batch(c, d)
    assert np.array_equal(a, a.T)
    assert np.max(np.abs(a.sum(axis=1))) <= 1e-14 * max(1.0, np.abs(a).max())
    q = x @ a @ x
    assert q <= 1e-12 * np.abs(a).max() * max(1.0, x @ x)
    # Equality only on span(1): the perpendicular part is strictly dissipated.
    xp = x - x.mean()
    if np.linalg.norm(xp) > 1e-6:
        assert xp @ a @ xp < 0


def test_homogeneous_of_degree_two():
    rng = np.random.default_rng(5)
    d = _random_delta(rng, 3)
    c = rng.random(3) + 0.2
    x = rng.standard_normal(3)
    assert x @ ms_matrix_batch(2 * c, d) @ x == pytest.approx(4 * (x @ ms_matrix_batch(c, d) @ x), rel=1e-13)


def test_project_off_kernel_examples():
    np.testing.assert_allclose(project_off_kernel(np.ones(3)), 0.0, atol=1e-16)
    np.testing.assert_allclose(project_off_kernel([1.0, -1.0]), [1.0, -1.0])
    np.testing.assert_allclose(project_off_kernel([2.0, 0.0, 1.0]), [1.0, -1.0, 0.0])


def test_solve_flux_force_examples():
    A = build_ms_matrix([1.0, 1.0], 1.0)
    assert np.all(solve_flux_force(A, np.zeros((2, 3))) == 0)
    U = solve_flux_force(A, [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
    np.testing.assert_allclose(U, [[-0.5, 0.0, 0.0], [0.5, 0.0, 0.0]], atol=1e-15)


def test_solve_flux_force_random_n4():
    rng = np.random.default_rng(7)
    A = build_ms_matrix(rng.random(4) + 0.1, _random_delta(rng, 4))
    rhs = project_off_kernel(rng.standard_normal((4, 3)))
    U = solve_flux_force(A, rhs)
    assert np.linalg.norm(A.apply(U) - rhs) / np.linalg.norm(rhs) < 1e-10
    np.testing.assert_allclose(U.sum(axis=0), 0.0, atol=1e-13)


def test_solvability_violation():
    A = build_ms_matrix([1.0, 2.0], 1.0)
    with pytest.raises(SolvabilityError):
        solve_flux_force(A, [[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])


@given(c=arrays(float, (5, 3), elements=st.floats(0.05, 3.0)), seed=st.integers(0, 1000))
def test_pinv_is_moore_penrose(c, seed):
    d = _random_delta(np.random.default_rng(seed), 3)
    a = ms_matrix_batch(c, d)
    ap = pinv_batch(a)
    for k in range(5):
        A, P = a[k], ap[k]
        s = np.abs(A).max() * np.abs(P).max()
        np.testing.assert_allclose(A @ P @ A, A, atol=1e-10 * s * np.abs(A).max())
        np.testing.assert_allclose(P @ A @ P, P, atol=1e-10 * s * np.abs(P).max())
        np.testing.assert_allclose(P @ np.ones(3), 0.0, atol=1e-12 * np.abs(P).max())


def test_spectral_constants_single_point():
    sc = estimate_spectral_constants(1.0, ([1.0, 1.0], [1.0, 1.0]), n_samples=10)
    # Eigenvalues of [[-1,1],[1,-1]] are 0 and -2.
    assert sc.lambda_a == pytest.approx(2.0, rel=1e-14)
    assert sc.mu_a == pytest.approx(2.0 / 4.0, rel=1e-14)


def test_spectral_constants_scale_invariant():
    rng = np.random.default_rng(11)
    d = _random_delta(rng, 3)
    a = estimate_spectral_constants(d, ([0.5] * 3, [1.5] * 3), n_samples=500, seed=2)
    b = estimate_spectral_constants(d, ([1.0] * 3, [3.0] * 3), n_samples=500, seed=2)
    assert a.lambda_a == pytest.approx(b.lambda_a, rel=1e-12)
    assert a.mu_a == pytest.approx(b.mu_a, rel=1e-12)


@pytest.mark.parametrize("n", [2, 3, 5])
def test_spectral_inequalities_on_samples(n):
    rng = np.random.default_rng(n)
    d = _random_delta(rng, n)
    sc = estimate_spectral_constants(d, ([0.2] * n, [2.0] * n), n_samples=2000, seed=n)
    c = 0.2 + 1.8 * rng.random((2000, n))
    x = rng.standard_normal((2000, n))
    assert check_spectral_constants(sc, d, c, x) == (True, True)


def test_spectral_constants_bad_box():
    with pytest.raises(DegenerateInputError):
        estimate_spectral_constants(1.0, ([1.0, 1.0], [0.5, 2.0]), n_samples=10)
    with pytest.raises(DegenerateInputError):
        estimate_spectral_constants(1.0, ([0.0, 1.0], [1.0, 2.0]), n_samples=10)
