"""Closed-form diffusion coefficients against the Monte-Carlo integral."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mskin.diffusion import build_delta, coefficients_table, k_closed_form, k_from_delta, k_mc_oracle
from mskin.errors import DomainError, ParameterError
from mskin.mixture import AngularLaw, MixtureSpec


def test_maxwell_case_closed_form():
    b0 = 0.8
    spec = MixtureSpec((1.0, 1.0), 0.0, 1.0, AngularLaw.constant(b0))
    assert k_closed_form(spec, 0, 1, 1.0) == pytest.approx(2 * math.pi * b0, rel=1e-14)


def test_maxwell_case_temperature_independent():
    spec = MixtureSpec((1.0, 3.0), 0.0)
    assert k_closed_form(spec, 0, 1, 0.3) == pytest.approx(k_closed_form(spec, 0, 1, 7.0), rel=1e-14)


def test_hard_sphere_like_temperature_scaling():
    spec = MixtureSpec((1.0, 3.0), 1.0)
    assert k_closed_form(spec, 0, 1, 4.0) / k_closed_form(spec, 0, 1, 1.0) == pytest.approx(2.0, rel=1e-14)


def test_phi_constant_is_a_prefactor():
    a = MixtureSpec((1.0, 2.0), 0.5, 1.0)
    b = MixtureSpec((1.0, 2.0), 0.5, 2.5)
    assert k_closed_form(b, 0, 1, 1.3) == pytest.approx(2.5 * k_closed_form(a, 0, 1, 1.3), rel=1e-14)


def test_delta_maxwell_case():
    b0 = 1.3
    model = build_delta(MixtureSpec((1.0, 1.0), 0.0, 1.0, AngularLaw.constant(b0)))
    assert model.delta[0, 1] == pytest.approx(1.0 / (2 * math.pi * b0), rel=1e-14)
    assert np.array_equal(model.delta, model.delta.T)


@given(T=st.sampled_from([0.5, 1.0, 2.0]), gamma=st.floats(0.0, 1.0), m=st.floats(0.5, 5.0))
def test_delta_identity(T, gamma, m):
    spec = MixtureSpec((1.0, m), gamma)
    model = build_delta(spec)
    for i in range(2):
        for j in range(2):
            assert k_closed_form(spec, i, j, T) * model.delta[i, j] == pytest.approx(T ** (gamma / 2), rel=1e-13)
    np.testing.assert_allclose(k_from_delta(model, T)[0, 1], k_closed_form(spec, 0, 1, T), rtol=1e-13)


def test_domain_errors():
    spec = MixtureSpec((1.0, 1.0))
    with pytest.raises(DomainError):
        k_closed_form(spec, 0, 1, 0.0)
    with pytest.raises(ParameterError):
        k_mc_oracle(spec, 0, 1, 1.0, n_samples=100)


def test_mc_oracle_maxwell_case():
    spec = MixtureSpec((1.0, 1.0), 0.0, 1.0, AngularLaw.constant(1.0))
    est, err = k_mc_oracle(spec, 0, 1, 1.0, n_samples=1_000_000, seed=11)
    assert abs(est - 2 * math.pi) <= 3 * err


def test_mc_oracle_gamma_one_equal_masses():
    spec = MixtureSpec((1.0, 1.0), 1.0)
    est, err = k_mc_oracle(spec, 0, 1, 1.0, n_samples=400_000, seed=5)
    assert abs(est - k_closed_form(spec, 0, 1, 1.0)) <= 3 * err


def test_mc_oracle_pair_symmetry():
    spec = MixtureSpec((1.0, 4.0), 1.0)
    a, ea = k_mc_oracle(spec, 0, 1, 1.0, n_samples=200_000, seed=3)
    b, eb = k_mc_oracle(spec, 1, 0, 1.0, n_samples=200_000, seed=3)
    assert abs(a - b) <= 3 * math.hypot(ea, eb)


def test_mc_oracle_is_reproducible():
    spec = MixtureSpec((1.0, 2.0), 0.0)
    assert k_mc_oracle(spec, 0, 1, 1.0, 20_000, seed=1) == k_mc_oracle(spec, 0, 1, 1.0, 20_000, seed=1)


def test_coefficients_table_csv():
    rows, text = coefficients_table(MixtureSpec((1.0, 2.0)))
    assert len(rows) == 3
    header = text.splitlines()[0]
    assert header == "i,j,mu_ij,delta_ij,k_ij_T1,mc_estimate,std_err"
    assert rows[1][4] == pytest.approx(k_closed_form(MixtureSpec((1.0, 2.0)), 0, 1, 1.0))
