"""Maxwellians, moments, equilibria, sandwich bounds and serialization."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mskin.errors import DegenerateInputError, DomainError, ParameterError
from mskin.mixture import (
    AngularLaw,
    DistributionVector,
    MaxwellianParams,
    MixtureSpec,
    VelocityGrid,
    eval_maxwellian,
    global_equilibrium,
    macro_moments,
    maxwellian_bounds_check,
    maxwellian_moments,
    maxwellian_on_grid,
    normalized_equilibrium,
    read_distribution,
    tail_covering_samples,
    third_moment,
    write_distribution,
)

GRID64 = VelocityGrid(64, 8.0)


def _grid_moments(p: MaxwellianParams, grid: VelocityGrid):
    v = grid.points()
    f = eval_maxwellian(p, v)
    dv = grid.cell_volume
    mass = f.sum() * dv
    mom = (f[:, None] * v).sum(axis=0) * dv
    v2 = np.sum(v * v, axis=1)
    energy = (f * v2).sum() * dv
    third = (f[:, None] * v2[:, None] * v).sum(axis=0) * dv
    return mass, mom, energy, third


# --- mixture description ------------------------------------------------------


def test_spec_rejects_gamma_outside_range():
    with pytest.raises(DomainError):
        MixtureSpec((1.0, 1.0), gamma=1.5)
    with pytest.raises(DomainError):
        MixtureSpec((1.0, 1.0), gamma=-3.0)


def test_spec_rejects_bad_masses_and_asymmetric_constants():
    with pytest.raises(DomainError):
        MixtureSpec((1.0, -1.0))
    with pytest.raises(DomainError):
        MixtureSpec((1.0, 2.0), phi_const=[[1.0, 2.0], [1.0, 1.0]])


def test_kinetic_range_enforced():
    spec = MixtureSpec((1.0,), gamma=-1.0)
    with pytest.raises(DomainError):
        spec.require_kinetic()
    MixtureSpec((1.0,), gamma=1.0).require_kinetic()


def test_angular_law_norms():
    law = AngularLaw.constant(0.7)
    assert law.l1_norm() == pytest.approx(1.4, rel=1e-14)
    tab = AngularLaw.tabulated([-1.0, 0.0, 1.0], [1.0, 2.0, 1.0])
    assert tab(0.0) == pytest.approx(2.0)
    assert tab.first_moment() == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(DomainError):
        AngularLaw.tabulated([-1.0, 1.0], [1.0, -1.0])


def test_reduced_mass():
    spec = MixtureSpec((1.0, 4.0))
    assert spec.reduced_mass(0, 1) == pytest.approx(0.8)
    assert spec.reduced_mass(0, 0) == pytest.approx(0.5)


# --- Maxwellian evaluation ------------------------------------------------------


def test_peak_value_unit_maxwellian():
    p = MaxwellianParams(1.0, 1.0)
    assert float(eval_maxwellian(p, np.zeros(3))) == pytest.approx((2 * math.pi) ** -1.5, rel=1e-14)
    assert (2 * math.pi) ** -1.5 == pytest.approx(0.06349, abs=1e-5)


def test_peak_value_linear_in_concentration():
    p1 = MaxwellianParams(1.0, 1.0)
    p2 = MaxwellianParams(2.0, 1.0)
    assert float(eval_maxwellian(p2, np.zeros(3))) == pytest.approx(2 * float(eval_maxwellian(p1, np.zeros(3))))


def test_grid_integral_reproduces_concentration():
    p = MaxwellianParams(1.7, 1.0, (0.3, -0.2, 0.1), 1.2)
    mass, *_ = _grid_moments(p, GRID64)
    assert mass == pytest.approx(1.7, rel=1e-10)


def test_invalid_maxwellian_parameters():
    with pytest.raises(DomainError):
        MaxwellianParams(0.0, 1.0)
    with pytest.raises(DomainError):
        MaxwellianParams(1.0, 1.0, temperature=-1.0)
    with pytest.raises(DomainError):
        MaxwellianParams(1.0, 1.0, epsilon=1.5)


# --- moments ------------------------------------------------------------------


def test_moments_zero_velocity():
    c, mom, e = maxwellian_moments(MaxwellianParams(1.0, 2.0))
    assert (c, e) == (1.0, pytest.approx(1.5))
    assert np.all(mom == 0)


def test_moments_shifted_small_eps():
    # (c=1, m=1, u=(1,0,0), T=1, eps=0.5) -> (1, (0.5,0,0), 3 + 0.25)
    c, mom, e = maxwellian_moments(MaxwellianParams(1.0, 1.0, (1.0, 0.0, 0.0), 1.0, 0.5))
    assert c == 1.0
    np.testing.assert_allclose(mom, [0.5, 0.0, 0.0], atol=1e-15)
    assert e == pytest.approx(3.25, rel=1e-15)


def test_third_moment_values():
    assert np.all(third_moment(MaxwellianParams(1.0, 1.0)) == 0)
    np.testing.assert_allclose(third_moment(MaxwellianParams(1.0, 1.0, (1.0, 0.0, 0.0))), [6.0, 0.0, 0.0], rtol=1e-15)


def test_third_moment_vanishes_linearly_in_eps():
    vals = [third_moment(MaxwellianParams(1.0, 1.0, (1.0, 0.0, 0.0), 1.0, e))[0] for e in (1e-2, 1e-3)]
    assert vals[0] / vals[1] == pytest.approx(10.0, rel=1e-3)


@pytest.mark.parametrize(
    "params",
    [
        MaxwellianParams(1.0, 2.0),
        MaxwellianParams(1.0, 1.0, (1.0, 0.0, 0.0), 1.0, 0.5),
        MaxwellianParams(0.8, 1.5, (0.4, -0.3, 0.2), 1.3, 1.0),
    ],
)
def test_closed_moments_match_quadrature(params):
    mass, mom, energy, third = _grid_moments(params, GRID64)
    c, m1, e = maxwellian_moments(params)
    t3 = third_moment(params)
    assert mass == pytest.approx(c, rel=1e-6)
    np.testing.assert_allclose(mom, m1, rtol=1e-6, atol=1e-9)
    assert energy == pytest.approx(e, rel=1e-6)
    np.testing.assert_allclose(third, t3, rtol=1e-6, atol=1e-9)


@given(
    c=st.floats(0.1, 3.0),
    m=st.floats(0.5, 4.0),
    T=st.floats(0.5, 2.0),
    u=st.tuples(*[st.floats(-1.0, 1.0)] * 3),
    eps=st.floats(0.01, 1.0),
)
def test_moments_properties(c, m, T, u, eps):
    p = MaxwellianParams(c, m, u, T, eps)
    c0, mom, e = maxwellian_moments(p)
    su = eps * np.asarray(u)
    assert c0 == c
    np.testing.assert_allclose(mom, c * su, rtol=1e-14, atol=1e-300)
    assert e >= 3 * c * T / m * (1 - 1e-14)
    # Third moment is parallel to the shift.
    t3 = third_moment(p)
    assert np.linalg.norm(np.cross(t3, su)) <= 1e-12 * (1 + np.linalg.norm(t3))


# --- equilibria ---------------------------------------------------------------


def test_global_equilibrium_fixed_point():
    spec = MixtureSpec((1.0, 1.0))
    grid = VelocityGrid(32, 7.0)
    mu = normalized_equilibrium(spec, [1.0, 1.0], grid)
    mom, eq = global_equilibrium(spec, mu)
    np.testing.assert_allclose(mom.c, [1.0, 1.0], rtol=1e-9)
    np.testing.assert_allclose(mom.bulk_velocity, 0.0, atol=1e-14)
    assert mom.temperature == pytest.approx(1.0, rel=1e-8)
    np.testing.assert_allclose(eq.values, mu.values, rtol=1e-7, atol=1e-16)


def test_global_equilibrium_common_drift():
    spec = MixtureSpec((1.0, 1.0))
    grid = VelocityGrid(32, 7.0)
    F = maxwellian_on_grid([MaxwellianParams(1.0, 1.0, (0.1, 0, 0)), MaxwellianParams(1.0, 1.0, (0.1, 0, 0))], grid)
    mom, _ = global_equilibrium(spec, F)
    np.testing.assert_allclose(mom.bulk_velocity, [0.1, 0.0, 0.0], atol=1e-8)


def test_global_equilibrium_unequal_masses_unit_temperature():
    spec = MixtureSpec((1.0, 2.0))
    grid = VelocityGrid(32, 7.0)
    F = maxwellian_on_grid([MaxwellianParams(1.0, 1.0), MaxwellianParams(1.0, 2.0)], grid)
    mom, _ = global_equilibrium(spec, F)
    assert mom.temperature == pytest.approx(1.0, rel=1e-7)


def test_equilibrium_rejects_empty_distribution():
    spec = MixtureSpec((1.0,))
    grid = VelocityGrid(4, 3.0)
    with pytest.raises(DegenerateInputError):
        global_equilibrium(spec, DistributionVector(grid, np.zeros((1, grid.size))))


def test_macro_moments_species_mismatch():
    grid = VelocityGrid(4, 3.0)
    F = normalized_equilibrium(MixtureSpec((1.0,)), [1.0], grid)
    with pytest.raises(DomainError):
        macro_moments(MixtureSpec((1.0, 1.0)), F)


# --- sandwich bounds ----------------------------------------------------------


@pytest.mark.parametrize("delta", [0.1, 0.5, 0.9])
def test_bounds_at_zero_perturbation(delta):
    p = MaxwellianParams(1.3, 1.0)
    v = tail_covering_samples(2000, p, seed=1)
    rep = maxwellian_bounds_check(p, delta, v, delta_ms=0.05)
    assert rep.lower_margin >= -1e-12 and rep.upper_margin >= -1e-12
    assert rep.r_low == pytest.approx(1.0) and rep.r_up == pytest.approx(1.0)


def test_bounds_perturbed_state_many_samples():
    p = MaxwellianParams(1.0, 1.0, (0.1, 0.0, 0.0), 1.05, 1.0)
    v = tail_covering_samples(100_000, p, seed=2)
    rep = maxwellian_bounds_check(p, 0.5, v, delta_ms=0.1, masses=(1.0, 2.0))
    assert rep.n_samples == 100_000
    assert rep.lower_margin >= 0 and rep.upper_margin >= 0


def test_bounds_reject_delta_out_of_range():
    p = MaxwellianParams(1.0, 1.0)
    with pytest.raises(ParameterError):
        maxwellian_bounds_check(p, 1.0 / 1.1 + 0.01, np.zeros((1, 3)), delta_ms=0.1, which="upper")
    with pytest.raises(ParameterError):
        maxwellian_bounds_check(p, 0.95, np.zeros((1, 3)), delta_ms=0.1, which="lower")


@given(
    u=st.tuples(*[st.floats(-0.3, 0.3)] * 3),
    T=st.floats(0.92, 1.08),
    delta=st.floats(0.05, 0.85),
    seed=st.integers(0, 1000),
)
def test_bounds_property(u, T, delta, seed):
    p = MaxwellianParams(1.0, 1.0, u, T, 1.0)
    v = tail_covering_samples(500, p, seed=seed)
    rep = maxwellian_bounds_check(p, delta, v, delta_ms=0.1)
    assert rep.lower_margin >= -1e-12 and rep.upper_margin >= -1e-12


# --- serialization ------------------------------------------------------------


def test_distribution_round_trip(tmp_path):
    spec = MixtureSpec((1.0, 2.0))
    F = normalized_equilibrium(spec, [1.0, 0.5], VelocityGrid(6, 4.0))
    path = tmp_path / "f.bin"
    write_distribution(path, spec, F)
    masses, G = read_distribution(path)
    assert masses == (1.0, 2.0)
    assert G.grid == F.grid
    assert np.array_equal(G.values, F.values)
