"""Perturbative Maxwell-Stefan solver: grid, sub-steps, iteration, diagnostics and runs."""

from __future__ import annotations

import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mskin.errors import InitialDataError, IterationDivergenceError, ParameterError
from mskin.mixture import MixtureSpec
from mskin.ms_solver import (
    MSRunConfig,
    PerturbationState,
    PeriodicGrid,
    ctot_T_residual,
    energy_report,
    fick_residual,
    heat_solution,
    make_well_prepared_initial_data,
    ms_constants,
    parabolic_dt,
    picard_advance,
    profile_field,
    recover_velocity,
    run_simulation,
    smallness_ratio,
    step_concentrations,
    step_ctot,
    step_temperature,
)

SPEC = MixtureSpec((1.0, 2.0), 0.0)
C_BAR = [1.0, 1.0]


def _cos(grid, a=1.0, k=1):
    return a * np.cos(2 * np.pi * k * grid.points()[0])


def _state(c_tilde, spec=SPEC, c_bar=C_BAR, lam=1.0, alpha=1.0):
    return make_well_prepared_initial_data(np.asarray(c_tilde), lam, c_bar, alpha, spec)


def _noniso(grid, e0=0.05):
    return _state(np.stack([_cos(grid, e0), _cos(grid, 0.5 * e0)]))


def _iso(grid, e0=0.05):
    return _state(np.stack([_cos(grid, e0), _cos(grid, -e0)]))


# --- grid ---------------------------------------------------------------------


def test_grid_validation():
    with pytest.raises(ParameterError):
        PeriodicGrid(1, 7)
    with pytest.raises(ParameterError):
        PeriodicGrid(4, 8)


def test_spectral_derivatives_of_cosine():
    g = PeriodicGrid(1, 16)
    x = g.points()[0]
    f = np.cos(2 * np.pi * x)
    np.testing.assert_allclose(g.grad(f)[0], -2 * np.pi * np.sin(2 * np.pi * x), atol=1e-12)
    np.testing.assert_allclose(g.div(g.grad(f)), -4 * np.pi**2 * f, atol=1e-10)
    np.testing.assert_allclose(g.derivative(f, (2,)), -4 * np.pi**2 * f, atol=1e-10)


def test_dealiased_product_is_exact_for_resolved_modes():
    g = PeriodicGrid(1, 16)
    x = g.points()[0]
    a, b = np.cos(2 * np.pi * 3 * x), np.sin(2 * np.pi * 4 * x)
    prod = g.from_fine(g.to_fine(a) * g.to_fine(b))
    np.testing.assert_allclose(prod, a * b, atol=1e-13)


def test_hs_norm_parseval_two_dimensions():
    g = PeriodicGrid(2, 8)
    x, y = g.points()
    f = np.cos(2 * np.pi * (x + 2 * y))
    k2 = 4 * np.pi**2 * 5
    # |beta| <= 1: f, d_x f, d_y f.
    assert g.hs_sq(f, 1) == pytest.approx(0.5 * (1 + 4 * np.pi**2 + 16 * np.pi**2), rel=1e-12)
    assert g.l2_sq(g.grad(f)) == pytest.approx(0.5 * k2, rel=1e-12)


def test_profile_field_shapes():
    g = PeriodicGrid(1, 8)
    f = profile_field(g, [{"shape": "constant", "amplitude": 0.2}, {"shape": "cosine", "amplitude": 0.1, "k": [2]}])
    np.testing.assert_allclose(f, 0.2 + _cos(g, 0.1, 2), atol=1e-15)
    with pytest.raises(ParameterError):
        profile_field(g, [{"shape": "square"}])


# --- initial data -------------------------------------------------------------


def test_stationary_initial_data():
    s = _state(np.zeros((2, 16)))
    assert np.all(s.T_tilde == 0) and np.all(s.U_tilde == 0)


def test_two_species_isothermal_initial_data():
    g = PeriodicGrid(1, 32)
    s = _iso(g)
    assert np.max(np.abs(s.T_tilde)) == 0.0
    np.testing.assert_allclose(s.U_tilde.sum(axis=0), 0.0, atol=1e-16)
    c = s.concentrations()
    expected = s.delta[0, 1] * g.grad(s.c_tilde[0])[0] / (c[0] * c[1])
    np.testing.assert_allclose(s.U_tilde[1, 0] - s.U_tilde[0, 0], expected, atol=1e-15)
    assert ctot_T_residual(s) < 1e-12


@given(a=st.floats(-0.1, 0.1), b=st.floats(-0.1, 0.1), k=st.integers(1, 2), gamma=st.sampled_from([0.0, 0.5, 1.0]))
def test_initial_data_compatibility(a, b, k, gamma):
    # T~ ~ 1/c_tot is not band-limited; 64 points resolve it to rounding for these amplitudes.
    g = PeriodicGrid(1, 64)
    spec = MixtureSpec((1.0, 2.0), gamma)
    s = _state(np.stack([_cos(g, a, k), _cos(g, b, k)]), spec=spec)
    assert ctot_T_residual(s) < 1e-12
    assert abs(g.mean(s.T_tilde)) < 1e-14
    np.testing.assert_allclose(s.U_tilde.sum(axis=0), 0.0, atol=1e-14)
    min_c, min_T = s.positivity_margins()
    assert min_c > 0 and min_T > 0


def test_initial_data_rejects_negative_concentration():
    g = PeriodicGrid(1, 16)
    with pytest.raises(InitialDataError):
        _state(np.stack([_cos(g, 1.5), _cos(g, 0.0)]))
    with pytest.raises(ParameterError):
        make_well_prepared_initial_data(np.zeros((2, 16)), 1.5, C_BAR, 1.0, SPEC)


# --- total concentration ------------------------------------------------------


def test_heat_single_mode_decay():
    g = PeriodicGrid(1, 16)
    f = _cos(g)
    np.testing.assert_allclose(heat_solution(g, f, 0.7, 0.1), f * math.exp(-4 * math.pi**2 * 0.7 * 0.1), atol=1e-15)


def test_heat_constant_and_superposition():
    g = PeriodicGrid(1, 16)
    np.testing.assert_allclose(heat_solution(g, np.full(16, 0.3), 1.0, 5.0), 0.3, rtol=1e-15)
    f = _cos(g, 1.0, 1) + _cos(g, 0.5, 3)
    exp = _cos(g, math.exp(-4 * math.pi**2 * 0.01), 1) + _cos(g, 0.5 * math.exp(-36 * math.pi**2 * 0.01), 3)
    np.testing.assert_allclose(heat_solution(g, f, 1.0, 0.01), exp, atol=1e-15)


def test_step_ctot_uses_state():
    g = PeriodicGrid(1, 16)
    s = _noniso(g)
    np.testing.assert_allclose(step_ctot(s, 0.01), heat_solution(g, s.ctot_tilde, 1.0, 0.01), atol=0)


# --- temperature --------------------------------------------------------------


def test_temperature_constant_without_total_gradient():
    g = PeriodicGrid(1, 16)
    s = replace(_iso(g), T_tilde=np.full(16, 0.02))
    T = step_temperature(s, step_ctot(s, 0.01), 0.01)
    np.testing.assert_allclose(T, 0.02, atol=1e-16)


def _manufactured(n_x, n_steps, profile):
    """Run with forcing so that ``T~ = 0.1 e^{-t} g(x)`` solves the equation."""
    g = PeriodicGrid(1, n_x)
    x = g.points()[0]
    s = replace(_state(np.zeros((2, n_x))), T_tilde=g.filter(0.1 * profile(x)))
    dt = 1.0 / n_steps
    force = lambda t, X: -0.1 * math.exp(-t) * profile(X[0])  # noqa: E731
    for _ in range(n_steps):
        s = picard_advance(s, dt, forcing=force)
    return s, x, dt


def test_manufactured_temperature_first_order_in_time():
    prof = lambda x: np.cos(2 * np.pi * x)  # noqa: E731
    errs = []
    for n in (10, 20, 40):
        s, x, _ = _manufactured(16, n, prof)
        errs.append(np.max(np.abs(s.T_tilde - 0.1 * math.exp(-s.t) * prof(x))))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 0.95)


def test_manufactured_temperature_spatial_order():
    # Spatial error measured against the time-discrete solution of the same steps.
    prof = lambda x: np.exp(np.cos(2 * np.pi * x)) - 1.2660658777520082  # noqa: E731
    n_steps = 5
    dt = 1.0 / n_steps
    discrete = 1.0 - dt * sum(math.exp(-dt * k) for k in range(1, n_steps + 1))
    errs = []
    for n_x in (8, 12, 16):
        s, x, _ = _manufactured(n_x, n_steps, prof)
        errs.append(np.max(np.abs(s.T_tilde - 0.1 * discrete * prof(x))))
    assert errs[1] < errs[0] / 4 and errs[2] < errs[1] / (16 / 12) ** 2


# --- velocity and concentrations ---------------------------------------------


def test_stationary_velocity_is_zero():
    U, u = recover_velocity(_state(np.zeros((2, 16))))
    assert np.all(U == 0) and np.all(u == 0)


def test_recovered_velocity_matches_initial_construction():
    g = PeriodicGrid(1, 32)
    s = _iso(g)
    U, _ = recover_velocity(s)
    np.testing.assert_allclose(U, s.U_tilde, atol=1e-15)


@pytest.mark.parametrize("gamma", [0.0, 1.0])
def test_fick_closure(gamma):
    g = PeriodicGrid(1, 32)
    s = _state(np.stack([_cos(g, 0.05), _cos(g, 0.02, 2)]), spec=MixtureSpec((1.0, 2.0), gamma))
    assert fick_residual(s) <= 1e-10


def test_concentration_step_constant_profile_unchanged():
    s = _state(np.full((2, 16), 0.01))
    c_new = step_concentrations(s, step_ctot(s, 0.01), s.T_tilde, 0.01)
    np.testing.assert_allclose(c_new, s.c_tilde, atol=1e-16)


def test_concentration_sum_matches_total_step():
    g = PeriodicGrid(1, 32)
    s = _noniso(g)
    dt = parabolic_dt(s, 20.0)
    ct = step_ctot(s, dt)
    T = step_temperature(s, ct, dt)
    c_new = step_concentrations(s, ct, T, dt)
    np.testing.assert_allclose(c_new.sum(axis=0), ct, atol=1e-10)


def test_species_means_conserved_over_many_steps():
    g = PeriodicGrid(1, 32)
    c0 = np.stack([_cos(g, 0.05) + 0.01, _cos(g, 0.02, 2) - 0.02])
    s = _state(c0)
    means0 = g.mean(s.c_tilde)
    dt = parabolic_dt(s, 5.0)
    for _ in range(1000):
        s = picard_advance(s, dt)
    np.testing.assert_allclose(g.mean(s.c_tilde), means0, atol=1e-10)


# --- fixed-point iteration ----------------------------------------------------


def test_picard_stationary_one_iteration():
    s = picard_advance(_state(np.zeros((2, 16))), 0.01)
    assert s.picard_differences == (0.0,)


def test_picard_contracts_for_small_amplitude():
    g = PeriodicGrid(1, 32)
    s = _noniso(g)
    nxt = picard_advance(s, parabolic_dt(s, 20.0))
    d = np.array(nxt.picard_differences)
    assert len(d) > 2
    assert np.all(d[1:] / d[:-1] < 1)


def test_picard_diverges_for_large_amplitude():
    g = PeriodicGrid(1, 32)
    s = _noniso(g, e0=0.5)
    with pytest.raises(IterationDivergenceError) as info:
        picard_advance(s, parabolic_dt(s, 20.0))
    assert info.value.differences


def test_picard_rejects_bad_step():
    with pytest.raises(ParameterError):
        picard_advance(_state(np.zeros((2, 16))), 0.0)


# --- diagnostics --------------------------------------------------------------


def test_energy_report_stationary():
    s = _state(np.zeros((2, 16)))
    r = energy_report(s, 2, ms_constants(C_BAR, 1.0, 0.0, 2.0))
    assert r.E_s == 0 and r.D_s == 0


def test_energy_zero_parseval():
    g = PeriodicGrid(1, 32)
    a = 0.04
    c_bar = np.array([1.0, 2.0])
    c_tilde = np.stack([_cos(g, a / 2), _cos(g, a / 2)])
    s = PerturbationState(g, c_bar, 1.0, 1.0, np.ones((2, 2)), 0.0, c_tilde, np.zeros(32), np.zeros((2, 1, 32)))
    consts = ms_constants(c_bar, 1.0, 0.0, 1.5)
    expected = (a / 2) ** 2 / 2 * (1 / 1.0 + 1 / 2.0) + consts.chi * a**2 / 2
    assert energy_report(s, 0, consts).E_s == pytest.approx(expected, rel=1e-13)
    k2 = 4 * math.pi**2
    assert energy_report(s, 1, consts).E_s == pytest.approx(expected * (1 + k2), rel=1e-13)


def test_constants_formulas():
    k = ms_constants([1.0, 1.0], 1.0, 0.0, 2.0)
    assert k.chi == pytest.approx(4 / 12 + 3 * 1.5 / 2.0)
    assert k.d1 == pytest.approx(2.0 / 3)
    assert k.d2 == pytest.approx(0.5 + 2 / 12 + 3 * 1.5 / 4.0)


def test_smallness_ratio():
    g = PeriodicGrid(1, 32)
    r, consts, sc = smallness_ratio(_iso(g), lambda_a_samples=200)
    assert r == pytest.approx(math.sqrt(0.05**2 / 2 * 2), rel=1e-10)
    assert consts.lambda_a == sc.lambda_a > 0


# --- runs ---------------------------------------------------------------------


def _cfg(profiles, **kw):
    base = dict(spec=SPEC, c_bar=(1.0, 1.0), profiles=profiles, n_x=32, t_end=0.05, cfl=20.0, lambda_a_samples=200)
    base.update(kw)
    return MSRunConfig(**base)


def _mode(a, k=1):
    return ({"shape": "cosine", "amplitude": a, "k": [k]},)


def test_stationary_run_all_zero(tmp_path):
    res = run_simulation(_cfg((_mode(0.0), _mode(0.0))), tmp_path)
    assert res.passed
    for row in res.series:
        for key in ("E_0", "D_0", "E_2", "D_2", "residual_fick", "residual_ctotT", "ctot_heat_error"):
            assert row[key] == 0.0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert set(man["files"]) >= {"series.csv", "manifest.json"}
    assert man["config_hash"] == res.manifest["config_hash"]


def test_small_run_energy_decreasing():
    res = run_simulation(_cfg((_mode(0.05), _mode(-0.05)), t_end=0.2))
    E = np.array([r["E_0"] for r in res.series])
    assert np.all(np.diff(E) < 0)
    assert max(r["ctot_heat_error"] for r in res.series) <= 1e-10
    assert res.passed


def test_run_converges_to_constant_state():
    res = run_simulation(_cfg((_mode(0.05), _mode(-0.05)), t_end=5.0, cfl=100.0))
    s = res.final
    g = s.grid
    assert np.max(np.abs(s.c_tilde - g.mean(s.c_tilde)[:, None])) < 1e-5
    assert np.max(np.abs(s.T_tilde - g.mean(s.T_tilde))) < 1e-5


@pytest.mark.xfail(strict=True, reason="temperature has no self-diffusion and freezes once c_tot is uniform")
def test_run_converges_to_constant_state_nonisothermal():
    res = run_simulation(_cfg((_mode(0.05), _mode(0.02, 2)), t_end=4.0, cfl=100.0, on_breach="record"))
    s = res.final
    g = s.grid
    assert np.max(np.abs(s.c_tilde - g.mean(s.c_tilde)[:, None])) < 1e-5
    assert np.max(np.abs(s.T_tilde - g.mean(s.T_tilde))) < 1e-5


def test_smallness_threshold_enforced():
    with pytest.raises(InitialDataError):
        run_simulation(_cfg((_mode(0.3), _mode(-0.3))))


def test_run_is_deterministic(tmp_path):
    cfg = _cfg((_mode(0.05), _mode(0.025)), snapshot_every=5)
    run_simulation(cfg, tmp_path / "a")
    run_simulation(cfg, tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
