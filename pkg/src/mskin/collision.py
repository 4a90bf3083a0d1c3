"""Probes of the bi-species Boltzmann collision operator.

Two evaluation paths are provided:

* Monte-Carlo estimators for smooth closed-form inputs: the strong form
  ``Q_ij(F_i, F_j)(v)``, the symmetrized weak form of a pair of test
  functions, and the diffusive-scaling momentum exchange between two
  Maxwellians (flux-force limit).
* A deterministic lattice quadrature (see :mod:`mskin._lattice`) for the
  spatially homogeneous relaxation ``dF/dt = Q(F, F)``, which conserves
  species masses, momentum and energy to rounding.

The collision frequency ``nu_ij(v) = int B_ij M_j(v_*) dsigma dv_*`` is
reduced to a one-dimensional radial integral evaluated by adaptive
quadrature.

Post-collision velocities follow the sigma-representation

    v'   = (m_i v + m_j v_*)/(m_i + m_j) + m_j/(m_i + m_j) |v - v_*| sigma
    v_*' = (m_i v + m_j v_*)/(m_i + m_j) - m_i/(m_i + m_j) |v - v_*| sigma

with ``cos theta = sigma . (v - v_*) / |v - v_*|``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from . import _lattice
from ._util import csv_text, mean_and_stderr, rng_stream, uniform_sphere
from .diffusion import k_closed_form
from .errors import DomainError, InvariantFailure, ParameterError, StepSizeError
from .mixture import (
    DistributionVector,
    MaxwellianParams,
    MixtureSpec,
    VelocityGrid,
    eval_maxwellian,
    global_equilibrium,
)

__all__ = [
    "CollisionSample",
    "SmoothDistribution",
    "MCEstimate",
    "post_collision",
    "q_ij_mc",
    "weak_form_moment",
    "FluxProbeRow",
    "FluxProbeTable",
    "flux_limit_probe",
    "RelaxationResult",
    "homogeneous_relaxation",
    "NuField",
    "nu_eval",
]


# ---------------------------------------------------------------------------
# Collision kinematics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CollisionSample:
    """One binary collision: pre- and post-collision velocities."""

    v: np.ndarray
    v_star: np.ndarray
    sigma: np.ndarray
    v_post: np.ndarray
    v_star_post: np.ndarray


def post_collision(mi: float, mj: float, v, v_star, sigma, check: bool = True):
    """Post-collision velocities ``(v', v_*')`` for arrays of shape ``(..., 3)``.

    Raises
    ------
    DomainError
        If ``check`` and some ``sigma`` is not a unit vector to 1e-12.
    """
    v = np.asarray(v, dtype=float)
    vs = np.asarray(v_star, dtype=float)
    sig = np.asarray(sigma, dtype=float)
    if check and np.any(np.abs(np.linalg.norm(sig, axis=-1) - 1.0) > 1e-12):
        raise DomainError("sigma must be a unit vector")
    M = mi + mj
    cm = (mi * v + mj * vs) / M
    r = np.linalg.norm(v - vs, axis=-1, keepdims=True)
    return cm + (mj / M) * r * sig, cm - (mi / M) * r * sig


def _cos_theta(w: np.ndarray, r: np.ndarray, sig: np.ndarray) -> np.ndarray:
    return np.einsum("...k,...k->...", sig, w) / np.where(r > 0, r, 1.0)


# ---------------------------------------------------------------------------
# Smooth inputs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SmoothDistribution:
    """A Maxwellian times a low-degree polynomial, evaluable anywhere.

    ``F(v) = M(v) (1 + a . xi + b (|xi|^2 - 3))`` with
    ``xi = (v - eps u) / sqrt(T / m)``. With ``a = 0`` and ``b = 0`` this is
    the Maxwellian of ``params``.
    """

    params: MaxwellianParams
    linear: tuple[float, float, float] = (0.0, 0.0, 0.0)
    quadratic: float = 0.0

    def __call__(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        p = self.params
        m = eval_maxwellian(p, v)
        if self.quadratic == 0.0 and not any(self.linear):
            return m
        xi = (v - p.shift) / p.thermal_width
        poly = 1.0 + xi @ np.asarray(self.linear) + self.quadratic * (np.sum(xi * xi, axis=-1) - 3.0)
        return m * poly

    def proposal(self) -> tuple[np.ndarray, float]:
        """Mean and isotropic standard deviation of a dominating Gaussian."""
        p = self.params
        return p.shift, 1.25 * p.thermal_width

    @classmethod
    def maxwellian(cls, c: float, m: float, u=(0.0, 0.0, 0.0), T: float = 1.0) -> SmoothDistribution:
        return cls(MaxwellianParams(c, m, tuple(u), T, 1.0))


def _gauss_logpdf(x: np.ndarray, mean: np.ndarray, sd: float) -> np.ndarray:
    d = x - mean
    return -np.sum(d * d, axis=-1) / (2.0 * sd * sd) - 1.5 * math.log(2.0 * math.pi * sd * sd)


@dataclass
class MCEstimate:
    """Monte-Carlo estimate with its standard error.

    ``scale`` is the mean absolute size of the sampled loss term; values at
    the level ``1e-13 * scale`` are floating-point rounding rather than
    statistics. Unpacks as ``(value, std_err)``.
    """

    value: float
    std_err: float
    scale: float = 0.0

    def __iter__(self):
        yield self.value
        yield self.std_err


def q_ij_mc(
    spec: MixtureSpec,
    i: int,
    j: int,
    F_i: SmoothDistribution,
    F_j: SmoothDistribution,
    v,
    n_samples: int = 1_000_000,
    seed: int = 0,
    batch_size: int = 1 << 16,
) -> MCEstimate:
    """Estimate ``Q_ij(F_i, F_j)(v)`` from the strong form.

    ``v_*`` is drawn from a Gaussian dominating ``F_j`` and ``sigma``
    uniformly on the sphere.
    """
    spec.require_kinetic()
    v = np.asarray(v, dtype=float).reshape(3)
    mi, mj = spec.masses[i], spec.masses[j]
    mean, sd = F_j.proposal()
    fv = float(F_i(v))
    sums, sqs, loss_abs = [], [], []
    done, b = 0, 0
    while done < n_samples:
        m = min(batch_size, n_samples - done)
        rng = rng_stream(seed, i, j, b)
        vs = mean + sd * rng.standard_normal((m, 3))
        sig = uniform_sphere(rng, m)
        w = v - vs
        r = np.linalg.norm(w, axis=1)
        kern = spec.kernel(i, j, r, _cos_theta(w, r, sig))
        vp, vsp = post_collision(mi, mj, v, vs, sig, check=False)
        inv_pdf = 4.0 * math.pi * np.exp(-_gauss_logpdf(vs, mean, sd))
        loss = kern * fv * F_j(vs) * inv_pdf
        f = kern * F_i(vp) * F_j(vsp) * inv_pdf - loss
        sums.append(float(f.sum()))
        sqs.append(float((f * f).sum()))
        loss_abs.append(float(np.abs(loss).sum()))
        done += m
        b += 1
    mean_v, err = mean_and_stderr(sums, sqs, n_samples)
    return MCEstimate(mean_v, err, math.fsum(loss_abs) / n_samples)


TestFunction = Callable[[np.ndarray], np.ndarray]


def weak_form_moment(
    spec: MixtureSpec,
    i: int,
    j: int,
    F_i: SmoothDistribution,
    F_j: SmoothDistribution,
    psi_i: TestFunction,
    psi_j: TestFunction,
    n_samples: int = 1_000_000,
    seed: int = 0,
    batch_size: int = 1 << 16,
) -> MCEstimate:
    """Estimate ``int Q_ij(F_i,F_j) psi_i dv + int Q_ji(F_j,F_i) psi_j dv``.

    Uses the single symmetrized integral

        -1/2 int B_ij (F_i' F_j*' - F_i F_j*)(psi_i' + psi_j*' - psi_i - psi_j*)

    over ``(v, v_*, sigma)``, with ``v`` and ``v_*`` drawn from Gaussians
    dominating ``F_i`` and ``F_j``.
    """
    spec.require_kinetic()
    mi, mj = spec.masses[i], spec.masses[j]
    mean_i, sd_i = F_i.proposal()
    mean_j, sd_j = F_j.proposal()
    sums, sqs, loss_abs = [], [], []
    done, b = 0, 0
    while done < n_samples:
        m = min(batch_size, n_samples - done)
        rng = rng_stream(seed, i, j, b)
        v = mean_i + sd_i * rng.standard_normal((m, 3))
        vs = mean_j + sd_j * rng.standard_normal((m, 3))
        sig = uniform_sphere(rng, m)
        w = v - vs
        r = np.linalg.norm(w, axis=1)
        kern = spec.kernel(i, j, r, _cos_theta(w, r, sig))
        vp, vsp = post_collision(mi, mj, v, vs, sig, check=False)
        inv_pdf = 4.0 * math.pi * np.exp(-_gauss_logpdf(v, mean_i, sd_i) - _gauss_logpdf(vs, mean_j, sd_j))
        before = F_i(v) * F_j(vs)
        after = F_i(vp) * F_j(vsp)
        dpsi = psi_i(vp) + psi_j(vsp) - psi_i(v) - psi_j(vs)
        f = -0.5 * kern * (after - before) * dpsi * inv_pdf
        sums.append(float(f.sum()))
        sqs.append(float((f * f).sum()))
        scale = np.abs(kern * before * inv_pdf) * (np.abs(psi_i(v)) + np.abs(psi_j(vs)))
        loss_abs.append(float(scale.sum()))
        done += m
        b += 1
    mean_v, err = mean_and_stderr(sums, sqs, n_samples)
    return MCEstimate(mean_v, err, math.fsum(loss_abs) / n_samples)


# ---------------------------------------------------------------------------
# Diffusive-scaling flux-force limit
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FluxProbeRow:
    """One epsilon of the flux-force probe.

    ``deviation`` and ``std_err`` are relative to ``|target|`` when the
    target is nonzero and absolute otherwise.
    """

    eps: float
    estimate: np.ndarray
    target: np.ndarray
    deviation: float
    std_err: float


@dataclass(frozen=True)
class FluxProbeTable:
    rows: tuple[FluxProbeRow, ...]

    def slope(self) -> float:
        """Least-squares log-log slope of deviation against epsilon."""
        e = np.log([r.eps for r in self.rows])
        d = np.log([max(r.deviation, 1e-300) for r in self.rows])
        return float(np.polyfit(e, d, 1)[0])

    def to_csv(self) -> str:
        out = []
        for r in self.rows:
            out.append((r.eps, *r.estimate, *r.target, r.deviation, r.std_err))
        hdr = ["eps", "est_x", "est_y", "est_z", "target_x", "target_y", "target_z", "deviation", "std_err"]
        return csv_text(hdr, out)


@dataclass(frozen=True)
class MacroState:
    """Local macroscopic fields at a point: concentrations, velocities, temperature."""

    c: np.ndarray
    u: np.ndarray
    T: float

    @classmethod
    def of(cls, c, u, T) -> MacroState:
        c = np.asarray(c, dtype=float)
        u = np.asarray(u, dtype=float).reshape(c.size, 3)
        return cls(c, u, float(T))


def flux_limit_probe(
    spec: MixtureSpec,
    ms_state: MacroState | tuple,
    i: int,
    j: int,
    eps_list: Sequence[float],
    n_samples: int = 1_000_000,
    seed: int = 0,
    perturbation: MacroState | tuple | None = None,
    batch_size: int = 1 << 16,
) -> FluxProbeTable:
    """Compare ``(1/eps) int Q_ij(M_i^eps, M_j^eps) m_i v dv`` with ``-k_ij c_i c_j (u_i - u_j)``.

    ``M_k^eps`` is the Maxwellian with concentration ``c_k``, mean velocity
    ``eps u_k`` and temperature ``T``. An optional ``perturbation``
    ``(c1, u1, T1)`` adds first-order corrections: the Maxwellians are
    built from ``c + eps c1``, ``u + eps u1`` and ``T + eps T1`` while the
    target uses the limit fields ``(c, u, T)``, so the deviation is O(eps).

    The momentum exchange uses the weak form
    ``c_i c_j int B mu_ij (|w| sigma - w) G_i G_j`` with antithetic pairs
    ``(z, -z, sigma, -sigma)`` and the same random numbers for every eps.
    """
    spec.require_kinetic()
    st = ms_state if isinstance(ms_state, MacroState) else MacroState.of(*ms_state)
    n = spec.n_species
    if perturbation is None:
        pt = MacroState(np.zeros(n), np.zeros((n, 3)), 0.0)
    else:
        pt = perturbation if isinstance(perturbation, MacroState) else MacroState.of(*perturbation)
    for e in eps_list:
        if not (0.0 < e <= 1.0):
            raise ParameterError(f"eps must lie in (0, 1], got {e}")
    mi, mj = spec.masses[i], spec.masses[j]
    mu = mi * mj / (mi + mj)
    target = -k_closed_form(spec, i, j, st.T) * st.c[i] * st.c[j] * (st.u[i] - st.u[j])
    tnorm = float(np.linalg.norm(target))
    half = max(n_samples // 2, 1)
    rows = []
    for eps in eps_list:
        c_i = st.c[i] + eps * pt.c[i]
        c_j = st.c[j] + eps * pt.c[j]
        T = st.T + eps * pt.T
        if min(c_i, c_j, T) <= 0:
            raise DomainError("perturbed concentrations and temperature must stay positive")
        shift_i = eps * (st.u[i] + eps * pt.u[i])
        shift_j = eps * (st.u[j] + eps * pt.u[j])
        sums = [[], [], []]
        sqs = [[], [], []]
        done, b = 0, 0
        while done < half:
            m = min(batch_size, half - done)
            rng = rng_stream(seed, i, j, b)
            zi = rng.standard_normal((m, 3))
            zj = rng.standard_normal((m, 3))
            sig = uniform_sphere(rng, m)
            acc = np.zeros((m, 3))
            for sgn in (1.0, -1.0):
                v = shift_i + sgn * math.sqrt(T / mi) * zi
                vs = shift_j + sgn * math.sqrt(T / mj) * zj
                s = sgn * sig
                w = v - vs
                r = np.linalg.norm(w, axis=1)
                kern = spec.kernel(i, j, r, _cos_theta(w, r, s))
                acc += 0.5 * kern[:, None] * mu * (r[:, None] * s - w)
            f = acc * (4.0 * math.pi * c_i * c_j / eps)
            for a in range(3):
                sums[a].append(float(f[:, a].sum()))
                sqs[a].append(float((f[:, a] ** 2).sum()))
            done += m
            b += 1
        est, err = np.empty(3), np.empty(3)
        for a in range(3):
            est[a], err[a] = mean_and_stderr(sums[a], sqs[a], half)
        diff = float(np.linalg.norm(est - target))
        se = float(np.linalg.norm(err))
        if tnorm > 0:
            rows.append(FluxProbeRow(eps, est, target, diff / tnorm, se / tnorm))
        else:
            rows.append(FluxProbeRow(eps, est, target, diff, se))
    return FluxProbeTable(tuple(rows))


# ---------------------------------------------------------------------------
# Spatially homogeneous relaxation on the lattice
# ---------------------------------------------------------------------------


@dataclass
class RelaxationResult:
    """Trajectory of ``dF/dt = Q(F, F)`` with conserved moments and entropy.

    Arrays are indexed by recorded step (``times[k]``). ``entropy`` is
    ``H = sum_i int F_i log F_i dv``.
    """

    times: np.ndarray
    mass: np.ndarray
    momentum: np.ndarray
    energy: np.ndarray
    entropy: np.ndarray
    final: DistributionVector
    snapshots: list = field(default_factory=list, repr=False)

    def max_mass_drift(self) -> float:
        return float(np.max(np.abs(self.mass - self.mass[0]) / np.abs(self.mass[0])))

    def entropy_increments(self) -> np.ndarray:
        return np.diff(self.entropy)

    def to_csv(self) -> str:
        n = self.mass.shape[1]
        hdr = ["t", *(f"mass_{i}" for i in range(n)), "mom_x", "mom_y", "mom_z", "energy", "H"]
        rows = [
            (self.times[k], *self.mass[k], *self.momentum[k], self.energy[k], self.entropy[k])
            for k in range(len(self.times))
        ]
        return csv_text(hdr, rows)


def _moments_and_entropy(spec: MixtureSpec, F: np.ndarray, v: np.ndarray, dv: float):
    m = spec.mass_array
    mass = F.sum(axis=1) * dv
    mom = (m[:, None] * (F @ v)).sum(axis=0) * dv
    energy = 0.5 * float(m @ (F @ np.sum(v * v, axis=1))) * dv
    pos = F > 0
    H = float(np.sum(F[pos] * np.log(F[pos]))) * dv
    return mass, mom, energy, H


def homogeneous_relaxation(
    spec: MixtureSpec,
    F0: DistributionVector,
    dt: float,
    n_steps: int,
    scheme: str = "euler",
    rule: _lattice.LatticeRule | None = None,
    neg_tol: float = 1e-12,
    keep_every: int = 0,
) -> RelaxationResult:
    """Integrate the homogeneous multi-species Boltzmann equation on the grid.

    The collision integral uses the conservative lattice rule on the ball
    ``|v| <= v_max``; values outside the ball do not collide and stay fixed.
    Refining the grid (``n_v``) is the quadrature convergence knob.

    Parameters
    ----------
    scheme : {"euler", "rk2"}
        Forward Euler or Heun's second-order method.
    neg_tol : float
        Relative negativity tolerance; beyond it the step is rejected.
    keep_every : int
        Store a snapshot of F every ``keep_every`` steps (0 keeps none).

    Raises
    ------
    StepSizeError
        If F becomes negative beyond ``neg_tol * max F``.
    """
    if scheme not in ("euler", "rk2"):
        raise ParameterError(f"unknown scheme {scheme!r}")
    if dt <= 0 or n_steps < 0:
        raise ParameterError("dt must be positive and n_steps nonnegative")
    if np.any(F0.values <= 0):
        raise DomainError("relaxation needs a strictly positive initial distribution")
    rule = rule if rule is not None else _lattice.build_rule(spec, F0.grid)
    mask = rule.active_mask
    full = np.array(F0.values)
    F = full[:, mask].copy()
    v_all = F0.grid.points()
    dv = F0.grid.cell_volume
    fmax = float(F.max())

    def record(t):
        full[:, mask] = F
        mass, mom, en, H = _moments_and_entropy(spec, full, v_all, dv)
        times.append(t)
        masses.append(mass)
        moms.append(mom)
        energies.append(en)
        Hs.append(H)

    times, masses, moms, energies, Hs, snaps = [], [], [], [], [], []
    record(0.0)
    for k in range(1, n_steps + 1):
        q1 = _lattice.collide(rule, F, F)
        if scheme == "euler":
            F_new = F + dt * q1
        else:
            F1 = F + dt * q1
            F_new = F + 0.5 * dt * (q1 + _lattice.collide(rule, F1, F1))
        if np.min(F_new) < -neg_tol * fmax:
            raise StepSizeError(f"negative distribution at step {k} (min {np.min(F_new):.3e}); reduce dt below {dt}")
        F = np.maximum(F_new, 0.0)
        record(k * dt)
        if keep_every and k % keep_every == 0:
            snaps.append(full.copy())
    full[:, mask] = F
    return RelaxationResult(
        times=np.array(times),
        mass=np.array(masses),
        momentum=np.array(moms),
        energy=np.array(energies),
        entropy=np.array(Hs),
        final=DistributionVector(F0.grid, full),
        snapshots=snaps,
    )


def relaxation_time_step(spec: MixtureSpec, c: Sequence[float], cfl: float = 0.5, v_scale: float = 1.0) -> float:
    """Time step with ``dt * nu_max = cfl`` for a rough collision frequency bound."""
    nu = 0.0
    for i in range(spec.n_species):
        tot = 0.0
        for j in range(spec.n_species):
            tot += spec.phi_const[i, j] * 2.0 * math.pi * spec.angular[i][j].l1_norm() * c[j] * (1.0 + v_scale) ** spec.gamma
        nu = max(nu, tot)
    return cfl / nu


# ---------------------------------------------------------------------------
# Collision frequency
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NuField:
    """Collision frequencies ``nu_ij(v)`` and their ``<v>^gamma`` envelope.

    ``values[i, j]`` holds ``nu_ij`` at the sample velocities; ``low`` and
    ``up`` satisfy ``low c_j <v>^gamma <= nu_ij <= up c_j <v>^gamma``.
    """

    velocities: np.ndarray
    values: np.ndarray
    low: np.ndarray
    up: np.ndarray

    def total(self) -> np.ndarray:
        """``nu_i = sum_j nu_ij`` per species."""
        return self.values.sum(axis=1)


def _radial_potential(gamma: float, a: float, r: float) -> float:
    """``(a/pi)^{3/2} int |w - z|^gamma exp(-a |z|^2) dz`` for ``|w| = r``."""
    norm = (a / math.pi) ** 1.5
    if gamma == 0.0:
        return 1.0
    zmax = r + 40.0 / math.sqrt(a)

    if r == 0.0:
        f = lambda z: 4.0 * math.pi * z ** (2.0 + gamma) * math.exp(-a * z * z)
        pts = None
    else:
        g2 = gamma + 2.0

        def f(z):
            if z == 0.0:
                return 0.0
            ang = 2.0 * math.pi / (g2 * r * z) * ((r + z) ** g2 - abs(r - z) ** g2)
            return z * z * math.exp(-a * z * z) * ang

        pts = [r] if r < zmax else None
    val = integrate.quad(f, 0.0, zmax, points=pts, limit=400, epsabs=0.0, epsrel=1e-12)[0]
    return norm * val


def nu_eval(
    spec: MixtureSpec,
    ms_local: MacroState | tuple,
    eps: float,
    grid: VelocityGrid | np.ndarray,
    n_scan: int = 400,
    margin: float = 1e-3,
) -> NuField:
    """Collision frequencies ``nu_ij^eps(v) = int B_ij M_j^eps(v_*) dsigma dv_*``.

    The angular integral gives ``2 pi |b_ij|_1``; the remaining integral of
    ``|v - v_*|^gamma`` against the Gaussian is radial about ``eps u_j`` and
    is evaluated by adaptive quadrature.

    Envelope constants are fitted on an independent scan of
    ``(|v - eps u_j|, angle)`` space together with the large-velocity limit
    ``C^Phi 2 pi |b|_1``, widened by ``margin``, and then asserted on the
    requested velocities.

    Raises
    ------
    InvariantFailure
        If a requested velocity falls outside the fitted envelope.
    """
    spec.require_kinetic()
    st = ms_local if isinstance(ms_local, MacroState) else MacroState.of(*ms_local)
    v = grid.points() if isinstance(grid, VelocityGrid) else np.asarray(grid, dtype=float).reshape(-1, 3)
    n = spec.n_species
    g = spec.gamma
    jv = (1.0 + np.sum(v * v, axis=1)) ** (g / 2.0)
    vals = np.empty((n, n, len(v)))
    low = np.empty((n, n))
    up = np.empty((n, n))
    for j in range(n):
        a = spec.masses[j] / (2.0 * st.T)
        shift = eps * st.u[j]
        r = np.linalg.norm(v - shift, axis=1)
        key = np.round(r, 12)
        uniq, inv = np.unique(key, return_inverse=True)
        pot = np.array([_radial_potential(g, a, float(x)) for x in uniq])[inv]
        # Independent scan for the envelope of pot / <v>^gamma.
        s = float(np.linalg.norm(shift))
        rmax = max(float(r.max()), 1.0) * 2.0
        rs = np.linspace(0.0, rmax, n_scan)
        ps = np.array([_radial_potential(g, a, float(x)) for x in rs])
        cs = np.linspace(-1.0, 1.0, 41) if s > 0 else np.array([1.0])
        vv = s * s + rs[:, None] ** 2 + 2.0 * s * rs[:, None] * cs[None, :]
        ratio = ps[:, None] / (1.0 + vv) ** (g / 2.0)
        lo = min(float(ratio.min()), 1.0) * (1.0 - margin)
        hi = max(float(ratio.max()), 1.0) * (1.0 + margin)
        for i in range(n):
            pref = spec.phi_const[i, j] * 2.0 * math.pi * spec.angular[i][j].l1_norm()
            vals[i, j] = pref * st.c[j] * pot
            low[i, j] = pref * lo
            up[i, j] = pref * hi
            env = vals[i, j] / (st.c[j] * jv)
            if np.any(env < low[i, j]) or np.any(env > up[i, j]):
                raise InvariantFailure(
                    f"nu_{i}{j} leaves its <v>^gamma envelope: ratio in [{env.min():.6g}, {env.max():.6g}],"
                    f" envelope [{low[i, j]:.6g}, {up[i, j]:.6g}]"
                )
    return NuField(v, vals, low, up)
