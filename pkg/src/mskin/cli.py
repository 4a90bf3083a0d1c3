"""Scenario configuration, orchestration and the ``mskin`` command line.

A scenario is a TOML file with a ``mode`` and sectioned blocks::

    mode = "coeff_table"
    seed = 7

    [mixture]
    masses = [1.0, 1.0]
    gamma = 0.0
    phi = 1.0
    b0 = 1.0

    [numerics]
    samples = 1000000

Every mode writes CSV/JSON artifacts and a ``manifest.json`` recording the
configuration, its hash, derived constants and the outcome of each
assertion. Artifacts depend only on the configuration and seed, so repeated
runs are byte-identical. Wall times are reported on the console only.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import tomli

from . import __version__
from ._util import csv_text, rng_stream
from .errors import ConfigError, IterationDivergenceError, MskinError
from .mixture import AngularLaw, MaxwellianParams, MixtureSpec, VelocityGrid

__all__ = [
    "ScenarioConfig",
    "RunManifest",
    "parse_config",
    "config_from_dict",
    "run_scenario",
    "verify_all",
    "bundled_config_dir",
    "main",
    "MODES",
]

MODES = ("ms_run", "flux_probe", "relaxation", "linop_suite", "coeff_table", "matrix_suite")
MC_MODES = ("flux_probe", "linop_suite", "coeff_table", "matrix_suite")

_TOP_KEYS = {"mode", "seed", "name", "description", "mixture", "grid", "initial", "numerics", "output"}
_BLOCK_KEYS = {
    "mixture": {"masses", "gamma", "phi", "b0", "angular_nodes", "angular_values"},
    "grid": {"dim", "n_x", "n_v", "v_max", "n_v_refined"},
    "initial": {"c_bar", "lambda", "alpha", "profiles", "c", "u", "T", "c1", "u1", "T1", "pair", "maxwellians"},
    "numerics": {
        "dt", "cfl", "t_end", "picard_tol", "picard_max_iter", "samples", "eps_list", "s_list", "n_steps",
        "scheme", "n_random", "n_list", "c_range", "delta_range", "rel_tol", "min_slope", "check",
        "smallness", "tol_E", "refine", "contraction_check", "entropy_tol", "moment_tol", "gap_stability",
        "max_dof", "kernel_rtol", "gamma_tol",
    },
    "output": {"dir", "snapshot_every"},
}
_REQUIRED = {
    "ms_run": ("mixture", "grid", "initial", "numerics"),
    "flux_probe": ("mixture", "initial", "numerics"),
    "relaxation": ("mixture", "grid", "initial", "numerics"),
    "linop_suite": ("mixture", "grid", "initial"),
    "coeff_table": ("mixture",),
    "matrix_suite": ("numerics",),
}


@dataclass(frozen=True)
class ScenarioConfig:
    """A validated scenario.

    ``raw`` keeps the parsed TOML tables; typed accessors build the module
    inputs. ``source`` is the file the scenario was read from (if any).
    """

    mode: str
    seed: int | None
    mixture: MixtureSpec | None
    raw: dict
    name: str = "scenario"
    source: str | None = None

    def block(self, name: str) -> dict:
        return self.raw.get(name, {})

    def num(self, key: str, default: Any = None) -> Any:
        return self.block("numerics").get(key, default)

    def with_seed(self, seed: int) -> ScenarioConfig:
        raw = dict(self.raw)
        raw["seed"] = int(seed)
        return replace(self, seed=int(seed), raw=raw)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()


@dataclass
class RunManifest:
    """Outcome of one scenario.

    ``assertions`` maps check names to pass/fail; ``derived`` holds
    constants and measured figures. ``wall_time`` is not written to disk.
    """

    name: str
    mode: str
    config: dict
    config_hash: str
    seed: int | None
    derived: dict
    assertions: dict[str, bool]
    files: list[str] = field(default_factory=list)
    wall_time: float = 0.0
    error: str | None = None

    @property
    def passed(self) -> bool:
        return self.error is None and all(self.assertions.values())

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "mode": self.mode,
            "config": self.config,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "derived": self.derived,
            "assertions": self.assertions,
            "passed": self.passed,
            "error": self.error,
            "files": self.files,
            "software_version": __version__,
        }


# ----------------------------------------------------------------------------
# Parsing
# ----------------------------------------------------------------------------


def _err(where: str, msg: str) -> ConfigError:
    return ConfigError(f"{where}: {msg}")


def _mixture_from(block: dict, where: str) -> MixtureSpec:
    if "masses" not in block:
        raise _err(where, "[mixture] needs 'masses'")
    ang: AngularLaw
    try:
        if "angular_nodes" in block or "angular_values" in block:
            if "b0" in block:
                raise _err(where, "[mixture] takes either 'b0' or 'angular_nodes'/'angular_values'")
            ang = AngularLaw.tabulated(block.get("angular_nodes", ()), block.get("angular_values", ()))
        else:
            ang = AngularLaw.constant(float(block.get("b0", 1.0)))
        return MixtureSpec(tuple(block["masses"]), float(block.get("gamma", 0.0)), block.get("phi", 1.0), ang)
    except MskinError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise _err(where, f"[mixture] {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise _err(where, f"[mixture] {exc}") from exc


def config_from_dict(raw: dict, where: str = "<config>") -> ScenarioConfig:
    """Validate a parsed configuration table."""
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise _err(where, f"unknown top-level key(s) {sorted(unknown)}")
    mode = raw.get("mode")
    if mode not in MODES:
        raise _err(where, f"'mode' must be one of {list(MODES)}, got {mode!r}")
    for blk, keys in _BLOCK_KEYS.items():
        if blk in raw:
            if not isinstance(raw[blk], dict):
                raise _err(where, f"[{blk}] must be a table")
            bad = set(raw[blk]) - keys
            if bad:
                raise _err(where, f"unknown key(s) {sorted(bad)} in [{blk}]")
    for blk in _REQUIRED[mode]:
        if blk not in raw:
            raise _err(where, f"mode {mode!r} needs a [{blk}] block")
    seed = raw.get("seed")
    if seed is not None and (not isinstance(seed, int) or seed < 0 or seed >= 2**64):
        raise _err(where, "'seed' must be an integer in [0, 2^64)")
    needs_seed = mode in MC_MODES and (mode != "coeff_table" or "samples" in raw.get("numerics", {}))
    if needs_seed and seed is None:
        raise _err(where, f"mode {mode!r} draws random numbers and needs a 'seed'")
    mixture = _mixture_from(raw["mixture"], where) if "mixture" in raw else None
    if mode == "ms_run":
        init = raw["initial"]
        for k in ("c_bar", "profiles"):
            if k not in init:
                raise _err(where, f"[initial] needs {k!r} for ms_run")
        if len(init["c_bar"]) != mixture.n_species or len(init["profiles"]) != mixture.n_species:
            raise _err(where, "[initial] c_bar and profiles need one entry per species")
        if "t_end" not in raw["numerics"]:
            raise _err(where, "[numerics] needs 't_end' for ms_run")
    if mode == "flux_probe":
        for k in ("c", "u", "T"):
            if k not in raw["initial"]:
                raise _err(where, f"[initial] needs {k!r} for flux_probe")
        if "eps_list" not in raw["numerics"]:
            raise _err(where, "[numerics] needs 'eps_list' for flux_probe")
    if mode == "relaxation" and "maxwellians" not in raw["initial"]:
        raise _err(where, "[initial] needs 'maxwellians' for relaxation")
    if mode == "linop_suite" and "c_bar" not in raw["initial"]:
        raise _err(where, "[initial] needs 'c_bar' for linop_suite")
    name = str(raw.get("name", Path(where).stem if where != "<config>" else "scenario"))
    return ScenarioConfig(mode, seed, mixture, raw, name, None if where == "<config>" else where)


def parse_config(path: str | Path) -> ScenarioConfig:
    """Read and validate a TOML scenario.

    Raises
    ------
    ConfigError
        With the file name (and line for syntax errors) on any problem.
    """
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{p}: no such file")
    try:
        raw = tomli.loads(p.read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    cfg = config_from_dict(raw, str(p))
    if "name" not in raw:
        cfg = replace(cfg, name=p.stem)
    return cfg


# ----------------------------------------------------------------------------
# Mode runners: each returns (derived, assertions, artifacts)
# ----------------------------------------------------------------------------


def _run_coeff_table(cfg: ScenarioConfig):
    from .diffusion import build_delta, coefficients_table

    spec = cfg.mixture
    n = cfg.num("samples")
    rows, text = coefficients_table(spec, n_samples=n, seed=cfg.seed or 0)
    rel = float(cfg.num("rel_tol", 0.02))
    asserts = {}
    for (i, j, _mu, _d, k1, est, err) in rows:
        if n is not None:
            asserts[f"k_{i}{j}_matches_mc"] = abs(est - k1) <= max(3.0 * err, rel * abs(k1))
    model = build_delta(spec)
    derived = {"delta": model.delta.tolist(), "k_T1": (1.0 / model.delta).tolist()}
    return derived, asserts, {"coefficients.csv": text}


def _run_flux_probe(cfg: ScenarioConfig):
    from .collision import MacroState, flux_limit_probe
    from .diffusion import k_closed_form

    spec = cfg.mixture
    init = cfg.block("initial")
    st = MacroState.of(init["c"], init["u"], init["T"])
    pert = None
    if any(k in init for k in ("c1", "u1", "T1")):
        n = spec.n_species
        pert = MacroState.of(init.get("c1", [0.0] * n), init.get("u1", [[0.0] * 3] * n), init.get("T1", 0.0))
    i, j = init.get("pair", [0, 1])
    eps = [float(e) for e in cfg.num("eps_list")]
    tab = flux_limit_probe(spec, st, i, j, eps, int(cfg.num("samples", 1_000_000)), cfg.seed, pert)
    last = min(tab.rows, key=lambda r: r.eps)
    check = cfg.num("check", "slope")
    tol = float(cfg.num("rel_tol", 0.05))
    asserts = {"final_deviation": last.deviation <= max(3.0 * last.std_err, tol)}
    slope = tab.slope()
    if check == "slope":
        asserts["slope"] = slope >= float(cfg.num("min_slope", 0.8))
    elif check == "exact":
        asserts["every_deviation_within_3sigma"] = all(r.deviation <= 3.0 * r.std_err for r in tab.rows)
    else:
        raise ConfigError(f"[numerics] check must be 'slope' or 'exact', got {check!r}")
    derived = {
        "k_ij": k_closed_form(spec, i, j, st.T),
        "slope": slope,
        "deviations": [r.deviation for r in tab.rows],
        "std_errs": [r.std_err for r in tab.rows],
    }
    return derived, asserts, {"flux_probe.csv": tab.to_csv()}


def _run_relaxation(cfg: ScenarioConfig):
    from .collision import homogeneous_relaxation
    from .mixture import global_equilibrium, macro_moments, maxwellian_on_grid

    spec = cfg.mixture
    g = cfg.block("grid")
    grid = VelocityGrid(int(g.get("n_v", 16)), float(g.get("v_max", 6.0)))
    mx = cfg.block("initial")["maxwellians"]
    if len(mx) != spec.n_species:
        raise ConfigError("[initial] maxwellians needs one table per species")
    params = [
        MaxwellianParams(float(d.get("c", 1.0)), spec.masses[k], tuple(d.get("u", (0.0, 0.0, 0.0))), float(d.get("T", 1.0)))
        for k, d in enumerate(mx)
    ]
    F0 = maxwellian_on_grid(params, grid)
    res = homogeneous_relaxation(spec, F0, float(cfg.num("dt", 0.02)), int(cfg.num("n_steps", 40)),
                                 cfg.num("scheme", "euler"))
    m0, eq = global_equilibrium(spec, F0)
    mf = macro_moments(spec, res.final)
    dH = res.entropy_increments()
    etol = float(cfg.num("entropy_tol", 1e-8))
    mtol = float(cfg.num("moment_tol", 1e-4))
    scale_u = max(1.0, float(np.linalg.norm(m0.bulk_velocity)))
    dist = float(np.abs(res.final.values - eq.values).sum() / np.abs(eq.values).sum())
    asserts = {
        "entropy_nonincreasing": bool(np.all(dH <= etol)),
        "final_concentrations": bool(np.all(np.abs(mf.c - m0.c) <= mtol * np.abs(m0.c))),
        "final_bulk_velocity": float(np.max(np.abs(mf.bulk_velocity - m0.bulk_velocity))) <= mtol * scale_u,
        "final_temperature": abs(mf.temperature - m0.temperature) <= mtol * m0.temperature,
        "final_state_is_equilibrium": dist <= mtol,
    }
    derived = {
        "max_entropy_increment": float(dH.max()) if dH.size else 0.0,
        "equilibrium_temperature": m0.temperature,
        "final_temperature": mf.temperature,
        "relative_l1_distance_to_equilibrium": dist,
        "max_mass_drift": res.max_mass_drift(),
    }
    return derived, asserts, {"relaxation.csv": res.to_csv()}


def _run_linop(cfg: ScenarioConfig):
    from . import linearized as lin

    spec = cfg.mixture
    g = cfg.block("grid")
    c_bar = [float(c) for c in cfg.block("initial")["c_bar"]]
    n_v = int(g.get("n_v", 16))
    v_max = float(g.get("v_max", 6.0))
    n_rand = int(cfg.num("n_random", 1000))
    max_dof = int(cfg.num("max_dof", lin.MAX_DOF))
    L = lin.assemble_L(spec, c_bar, VelocityGrid(n_v, v_max), max_dof=max_dof)
    B = lin.kernel_basis(spec, c_bar, L.support)
    kdim, ev = lin.kernel_dimension(L, float(cfg.num("kernel_rtol", 1e-6)))
    gap = lin.estimate_spectral_gap(L, B, n_random=n_rand, seed=cfg.seed)
    rng = rng_stream(cfg.seed, 77)
    X = rng.standard_normal((n_rand, L.n_dof))
    quad = np.einsum("ij,ij->i", X @ L.matrix, X)
    nrm = np.einsum("ij,ij->i", X, X) * float(np.max(np.abs(ev)))
    f = rng.standard_normal((spec.n_species, L.support.size)) * B.sqrt_mu
    h = rng.standard_normal((spec.n_species, L.support.size)) * B.sqrt_mu
    par, tot = lin.gamma_orthogonality_check(spec, f, h, B, L.rule)
    cpi = lin.norm_equivalence_constant(B, spec.gamma)
    w = L.support.japanese(spec.gamma)
    Y = rng.standard_normal((n_rand, spec.n_species, L.support.size))
    P, _ = lin.project_pi_L(Y, B)
    lhs = np.sum(P * P * w, axis=(1, 2))
    rhs = cpi * np.sum(P * P, axis=(1, 2))
    asserts = {
        "kernel_dimension": kdim == spec.n_species + 4,
        "nonpositive_quadratic_form": bool(np.all(quad <= 1e-12 * nrm)),
        "gap_positive": gap.lambda_L > 0 and gap.weighted > 0,
        "gamma_orthogonal_to_kernel": par <= float(cfg.num("gamma_tol", 1e-6)) * tot,
        "norm_equivalence": bool(np.all(lhs <= rhs * (1 + 1e-12))),
    }
    derived = {
        "n_dof": L.n_dof,
        "kernel_dimension": kdim,
        "lambda_L": gap.lambda_L,
        "lambda_L_weighted": gap.weighted,
        "C_pi": cpi,
        "gamma_ratio": par / tot,
    }
    files = {
        "spectrum.csv": lin.spectrum_csv(ev),
        "kernel_defect.json": lin.kernel_defect_json(L, B, kdim, gap) + "\n",
    }
    n_ref = g.get("n_v_refined")
    if n_ref is not None:
        del L, X
        L2 = lin.assemble_L(spec, c_bar, VelocityGrid(int(n_ref), v_max), max_dof=max_dof)
        B2 = lin.kernel_basis(spec, c_bar, L2.support)
        gap2 = lin.estimate_spectral_gap(L2, B2, n_random=0, seed=cfg.seed)
        rel = abs(gap2.lambda_L - gap.lambda_L) / gap.lambda_L
        derived["lambda_L_refined"] = gap2.lambda_L
        derived["gap_relative_change"] = rel
        asserts["gap_stable_under_refinement"] = rel <= float(cfg.num("gap_stability", 0.1))
    return derived, asserts, files


def _run_matrix_suite(cfg: ScenarioConfig):
    from .ms_matrix import check_spectral_constants, estimate_spectral_constants, ms_matrix_batch, pinv_batch

    n_list = [int(n) for n in cfg.num("n_list", [2, 3, 5])]
    m = int(cfg.num("samples", 10_000))
    c_lo, c_hi = (float(x) for x in cfg.num("c_range", [0.1, 2.0]))
    d_lo, d_hi = (float(x) for x in cfg.num("delta_range", [0.5, 2.0]))
    asserts: dict[str, bool] = {}
    derived: dict[str, Any] = {}
    rows = []
    for n in n_list:
        rng = rng_stream(cfg.seed, n)
        d = d_lo + (d_hi - d_lo) * rng.random((n, n))
        d = np.triu(d) + np.triu(d, 1).T
        c = c_lo + (c_hi - c_lo) * rng.random((m, n))
        x = rng.standard_normal((m, n))
        a = ms_matrix_batch(c, d)
        null = float(np.max(np.abs(a.sum(axis=-1))))
        quad = float(np.max(np.einsum("mi,mij,mj->m", x, a, x)))
        ap = pinv_batch(a)
        b = x - x.mean(axis=1, keepdims=True)
        res = np.einsum("mij,mj->mi", a, np.einsum("mij,mj->mi", ap, b)) - b
        pres = float(np.max(np.linalg.norm(res, axis=1) / np.linalg.norm(b, axis=1)))
        consts = estimate_spectral_constants(d, ([c_lo] * n, [c_hi] * n), n_samples=2000, seed=cfg.seed + n)
        up, low = check_spectral_constants(consts, d, c, x)
        asserts[f"N{n}_kernel"] = null <= 1e-14
        asserts[f"N{n}_negative_semidefinite"] = quad <= 1e-12
        asserts[f"N{n}_pinv_residual"] = pres <= 1e-10
        asserts[f"N{n}_upper_inequality"] = up
        asserts[f"N{n}_lower_inequality"] = low
        derived[f"N{n}"] = consts.to_dict() | {"max_A1": null, "max_quadratic_form": quad, "pinv_residual": pres}
        rows.append((n, null, quad, pres, consts.lambda_a, consts.mu_a, up, low))
    text = csv_text(["N", "max_A1", "max_XAX", "pinv_residual", "lambda_a", "mu_a", "upper_ok", "lower_ok"], rows)
    return derived, asserts, {"matrix_suite.csv": text}


def _ms_config(cfg: ScenarioConfig, **over):
    from .ms_solver import MSRunConfig

    init = cfg.block("initial")
    g = cfg.block("grid")
    num = cfg.block("numerics")
    out = cfg.block("output")
    kw = dict(
        spec=cfg.mixture,
        c_bar=tuple(float(c) for c in init["c_bar"]),
        profiles=tuple(tuple(dict(m) for m in p) for p in init["profiles"]),
        lam=float(init.get("lambda", 1.0)),
        alpha=float(init.get("alpha", 1.0)),
        dim=int(g.get("dim", 1)),
        n_x=int(g.get("n_x", 128)),
        dt=None if num.get("dt") is None else float(num["dt"]),
        cfl=float(num.get("cfl", 20.0)),
        t_end=float(num["t_end"]),
        picard_tol=float(num.get("picard_tol", 1e-11)),
        picard_max_iter=int(num.get("picard_max_iter", 50)),
        s_list=tuple(int(s) for s in num.get("s_list", [0, 2])),
        snapshot_every=int(out.get("snapshot_every", 0)),
        smallness=float(num.get("smallness", 0.1)),
        tol_E=float(num.get("tol_E", 1e-8)),
        seed=int(cfg.seed or 0),
        on_breach="record",
    )
    kw.update(over)
    return MSRunConfig(**kw)


def _picard_ratio(series_states) -> float:
    worst = 0.0
    for diffs in series_states:
        d = [x for x in diffs]
        for a, b in zip(d, d[1:]):
            if a > 1e-13:
                worst = max(worst, b / a)
    return worst


def _threshold_scale(mcfg) -> float:
    """Scale of the initial profiles at which ``E_0^{1/2}`` meets the smallness threshold."""
    from .ms_solver import PeriodicGrid, make_well_prepared_initial_data, profile_field, smallness_ratio

    grid = PeriodicGrid(mcfg.dim, mcfg.n_x)
    base = np.stack([profile_field(grid, p) for p in mcfg.profiles])

    def ratio(s: float) -> float:
        st = make_well_prepared_initial_data(base * s, mcfg.lam, mcfg.c_bar, mcfg.alpha, mcfg.spec)
        return smallness_ratio(st, mcfg.lambda_a_samples, mcfg.seed)[0]

    lo, hi = 0.0, 1.0
    while ratio(hi) < mcfg.smallness:
        lo, hi = hi, 2.0 * hi
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if ratio(mid) < mcfg.smallness:
            lo = mid
        else:
            hi = mid
    return lo


def _run_ms(cfg: ScenarioConfig, out_dir: Path):
    from .ms_solver import (
        PeriodicGrid,
        ctot_T_residual,
        make_well_prepared_initial_data,
        parabolic_dt,
        picard_advance,
        profile_field,
        run_simulation,
    )

    mcfg = _ms_config(cfg)
    res = run_simulation(mcfg, out_dir, manifest_name="ms_manifest.json")
    asserts = dict(res.checks)
    max_ratio = _picard_ratio([res.final.picard_differences])
    derived = {
        "constants": res.manifest["constants"],
        "delta": res.manifest["delta"],
        "grid": res.manifest["grid"],
        "final": {k: res.series[-1][k] for k in res.series[-1]},
    }
    files = {}
    if cfg.num("refine", False):
        r1 = res.series[-1]["residual_ctotT"]
        fine = _ms_config(cfg, n_x=2 * mcfg.n_x, dt=(res.manifest["grid"]["dt"] / 4.0), snapshot_every=0)
        res2 = run_simulation(fine, None)
        r2 = res2.series[-1]["residual_ctotT"]
        ratio = r1 / r2 if r2 > 0 else math.inf
        exact = max(r1, r2) <= 1e-12
        derived["ctotT_residual"] = [r1, r2]
        derived["ctotT_residual_ratio"] = ratio if math.isfinite(ratio) else "inf"
        derived["ctotT_residual_at_rounding"] = exact
        asserts["ctotT_residual_refinement"] = exact or ratio >= 4.0
    if cfg.num("contraction_check", False):
        # Iterate ratios of the first step, then the deliberately large amplitude.
        grid = PeriodicGrid(mcfg.dim, mcfg.n_x)
        base = np.stack([profile_field(grid, p) for p in mcfg.profiles])
        st = make_well_prepared_initial_data(base, mcfg.lam, mcfg.c_bar, mcfg.alpha, mcfg.spec)
        dt = mcfg.dt if mcfg.dt is not None else parabolic_dt(st, mcfg.cfl)
        first = picard_advance(st, dt, mcfg.picard_max_iter, mcfg.picard_tol)
        ratio = _picard_ratio([first.picard_differences])
        s_thr = _threshold_scale(mcfg)
        derived["picard_differences"] = list(first.picard_differences)
        derived["picard_max_ratio"] = ratio
        derived["threshold_scale"] = s_thr
        asserts["picard_contracts"] = ratio < 1.0
        big = 10.0 * s_thr
        outcome = "converged"
        try:
            sb = make_well_prepared_initial_data(base * big, mcfg.lam, mcfg.c_bar, mcfg.alpha, mcfg.spec)
            picard_advance(sb, dt, mcfg.picard_max_iter, mcfg.picard_tol)
        except IterationDivergenceError as exc:
            outcome = "diverged"
            derived["large_amplitude_differences"] = exc.differences[:10]
        except MskinError as exc:
            outcome = type(exc).__name__
        derived["large_amplitude_outcome"] = outcome
        asserts["large_amplitude_diverges"] = outcome == "diverged"
    derived["picard_last_step_max_ratio"] = max_ratio
    return derived, asserts, files, res.files


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, (np.bool_, bool)):
        return bool(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating, float)):
        x = float(o)
        return x if math.isfinite(x) else repr(x)
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    return o


def _dump(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def run_scenario(cfg: ScenarioConfig, out_dir: str | Path | None = None) -> RunManifest:
    """Run one scenario, write its artifacts and return the manifest.

    Module errors propagate with the scenario name prepended.
    """
    out = Path(out_dir if out_dir is not None else cfg.block("output").get("dir", f"mskin_out/{cfg.name}"))
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    written: list[str] = []
    try:
        if cfg.mode == "ms_run":
            derived, asserts, files, written = _run_ms(cfg, out)
        else:
            runner = {
                "coeff_table": _run_coeff_table,
                "flux_probe": _run_flux_probe,
                "relaxation": _run_relaxation,
                "linop_suite": _run_linop,
                "matrix_suite": _run_matrix_suite,
            }[cfg.mode]
            derived, asserts, files = runner(cfg)
    except MskinError as exc:
        raise type(exc)(f"scenario {cfg.name!r}: {exc}") from exc
    for name, text in files.items():
        (out / name).write_text(text)
        written.append(name)
    man = RunManifest(
        name=cfg.name,
        mode=cfg.mode,
        config=cfg.raw,
        config_hash=cfg.digest(),
        seed=cfg.seed,
        derived=derived,
        assertions={k: bool(v) for k, v in asserts.items()},
        files=sorted(set(written) | {"manifest.json"}),
        wall_time=time.perf_counter() - t0,
    )
    (out / "manifest.json").write_text(_dump(man.to_dict()))
    return man


# ----------------------------------------------------------------------------
# Suites
# ----------------------------------------------------------------------------


def bundled_config_dir() -> Path:
    """Directory of the acceptance scenarios shipped with the package."""
    return Path(__file__).resolve().parent / "configs" / "acceptance"


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("MSKIN_THREADS", "1")))
    except ValueError:
        return 1


def _verify_one(path: str, out_root: str, seed: int | None) -> RunManifest:
    name = Path(path).stem
    try:
        cfg = parse_config(path)
        if seed is not None:
            cfg = cfg.with_seed(seed)
        cfg = replace(cfg, name=name)
    except ConfigError as exc:
        return RunManifest(name, "?", {}, "", None, {}, {"parsed": False}, error=f"config error: {exc}")
    try:
        return run_scenario(cfg, Path(out_root) / name)
    except MskinError as exc:
        return RunManifest(name, cfg.mode, cfg.raw, cfg.digest(), cfg.seed, {}, {"completed": False},
                           error=f"{type(exc).__name__}: {exc}")


def verify_all(config_dir: str | Path, out_dir: str | Path, seed: int | None = None,
               workers: int | None = None) -> dict:
    """Run every ``*.toml`` scenario in ``config_dir`` and aggregate results.

    Each scenario writes to ``out_dir/<config stem>``. ``summary.json`` and
    ``summary.txt`` in ``out_dir`` list pass/fail per scenario and per
    assertion; failures (including configuration errors) are data. The
    returned summary additionally holds wall times, which are not written.
    """
    cdir = Path(config_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = sorted(str(p) for p in cdir.glob("*.toml")) if cdir.is_dir() else []
    n_work = workers if workers is not None else _worker_count()
    if n_work > 1 and len(paths) > 1:
        with ProcessPoolExecutor(max_workers=min(n_work, len(paths))) as ex:
            mans = list(ex.map(_verify_one, paths, [str(out)] * len(paths), [seed] * len(paths)))
    else:
        mans = [_verify_one(p, str(out), seed) for p in paths]
    scenarios = {
        m.name: {"mode": m.mode, "passed": m.passed, "assertions": m.assertions, "error": m.error} for m in mans
    }
    summary = {
        "n_scenarios": len(mans),
        "n_passed": sum(m.passed for m in mans),
        "all_passed": all(m.passed for m in mans),
        "scenarios": scenarios,
    }
    (out / "summary.json").write_text(_dump(summary))
    lines = [f"{'scenario':40s} {'mode':13s} result"]
    for m in mans:
        lines.append(f"{m.name:40s} {m.mode:13s} {'PASS' if m.passed else 'FAIL'}")
        for k, v in m.assertions.items():
            lines.append(f"    {k:52s} {'pass' if v else 'FAIL'}")
        if m.error:
            lines.append(f"    error: {m.error}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    summary["wall_times"] = {m.name: m.wall_time for m in mans}
    summary["manifests"] = {m.name: m for m in mans}
    return summary


# ----------------------------------------------------------------------------
# Command line
# ----------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mskin", description="Multi-species kinetic and Maxwell-Stefan scenarios.")
    p.add_argument("--version", action="version", version=f"mskin {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="override the configured seed (unsigned 64-bit)")
    common.add_argument("--quiet", action="store_true", help="print nothing on success")
    r = sub.add_parser("run", parents=[common], help="run one scenario")
    r.add_argument("config")
    v = sub.add_parser("verify", parents=[common], help="run every scenario in a directory")
    v.add_argument("config_dir", nargs="?", help="directory of *.toml scenarios (default: bundled acceptance suite)")
    c = sub.add_parser("print-coeffs", parents=[common], help="print the diffusion-coefficient table")
    c.add_argument("config")
    return p


def main(argv: list[str] | None = None) -> int:
    """Entry point of the ``mskin`` console script. Returns the exit code."""
    args = _build_parser().parse_args(argv)
    say = (lambda *a, **k: None) if args.quiet else print
    if args.seed is not None and not (0 <= args.seed < 2**64):
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    try:
        if args.command == "verify":
            cdir = Path(args.config_dir) if args.config_dir else bundled_config_dir()
            out = Path(args.out or "mskin_verify")
            summary = verify_all(cdir, out, seed=args.seed)
            say((out / "summary.txt").read_text(), end="")
            for name, t in summary["wall_times"].items():
                say(f"wall time {name}: {t:.1f} s")
            return 0 if summary["all_passed"] else 1
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.command == "print-coeffs":
            if cfg.mixture is None:
                raise ConfigError(f"{args.config}: print-coeffs needs a [mixture] block")
            from .diffusion import coefficients_table

            n = cfg.num("samples")
            _, text = coefficients_table(cfg.mixture, n_samples=n, seed=cfg.seed or 0)
            if args.out:
                Path(args.out).mkdir(parents=True, exist_ok=True)
                (Path(args.out) / "coefficients.csv").write_text(text)
            if not args.quiet:
                sys.stdout.write(text)
            return 0
        man = run_scenario(cfg, args.out)
        for k, v in man.assertions.items():
            say(f"{k:52s} {'pass' if v else 'FAIL'}")
        say(f"{cfg.name}: {'PASS' if man.passed else 'FAIL'} ({man.wall_time:.1f} s)")
        return 0 if man.passed else 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MskinError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
