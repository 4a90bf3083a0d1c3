"""Linearized multi-species collision operator around the global equilibrium.

For ``F = mu + mu^{1/2} g`` the linearized operator is

    L_i(g) = mu_i^{-1/2} sum_j [Q_ij(mu_i, mu_j^{1/2} g_j) + Q_ij(mu_i^{1/2} g_i, mu_j)],

self-adjoint and nonpositive in L^2 with an (N+4)-dimensional kernel
spanned by ``mu^{1/2}`` times the collision invariants. This module
assembles L densely with the conservative lattice rule of
:mod:`mskin._lattice` on the velocities inside the ball ``|v| <= v_max``,
builds the kernel basis and projections, and estimates the spectral gap.

All L^2 inner products are grid quadratures ``sum_i sum_p f_i g_i h^3``
over the points of a :class:`VelocitySupport`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.sparse.linalg import LinearOperator, eigsh

from . import _lattice
from ._util import csv_text, rng_stream
from .errors import DomainError, InvariantFailure, SizeError
from .mixture import MaxwellianParams, MixtureSpec, VelocityGrid, eval_maxwellian

__all__ = [
    "VelocitySupport",
    "KernelBasis",
    "DiscreteOperator",
    "GapEstimate",
    "ball_support",
    "box_support",
    "kernel_basis",
    "assemble_L",
    "project_pi_L",
    "project_pi_L_formula",
    "kernel_dimension",
    "estimate_spectral_gap",
    "gamma_operator",
    "apply_L_eps",
    "gamma_orthogonality_check",
    "l_eps_orthogonality_check",
    "project_pi_T",
    "norm_equivalence_constant",
    "spectrum_csv",
    "kernel_defect_json",
    "MAX_DOF",
]

MAX_DOF = 20_000


@dataclass(frozen=True)
class VelocitySupport:
    """A set of grid velocities with uniform quadrature weight ``dv``."""

    grid: VelocityGrid
    velocities: np.ndarray
    index: np.ndarray

    @property
    def dv(self) -> float:
        return self.grid.cell_volume

    @property
    def size(self) -> int:
        return self.velocities.shape[0]

    def japanese(self, gamma: float) -> np.ndarray:
        """``<v>^gamma = (1 + |v|^2)^{gamma/2}`` at the support points."""
        return (1.0 + np.sum(self.velocities**2, axis=1)) ** (gamma / 2.0)


def box_support(grid: VelocityGrid) -> VelocitySupport:
    return VelocitySupport(grid, grid.points(), np.arange(grid.size))


def ball_support(grid: VelocityGrid) -> VelocitySupport:
    """Grid velocities with ``|v| <= v_max`` (the collision support)."""
    pts = grid.points()
    inside = np.flatnonzero(np.sum(pts**2, axis=1) <= grid.v_max**2 * (1 + 1e-12))
    return VelocitySupport(grid, pts[inside], inside)


def _sqrt_mu(spec: MixtureSpec, c_bar: Sequence[float], v: np.ndarray) -> np.ndarray:
    return np.stack(
        [np.sqrt(eval_maxwellian(MaxwellianParams(float(c), m), v)) for c, m in zip(c_bar, spec.masses, strict=True)]
    )


@dataclass(frozen=True)
class KernelBasis:
    """Kernel vectors of L sampled on a velocity support.

    ``vectors`` has shape ``(N+4, N, K)`` and follows the closed formulas
    (species densities, momenta, energy); ``orthonormal`` is their
    symmetric (Lowdin) orthonormalization in the grid inner product,
    which differs from ``vectors`` by the quadrature defect only.
    """

    support: VelocitySupport
    c_bar: np.ndarray
    sqrt_mu: np.ndarray
    vectors: np.ndarray
    orthonormal: np.ndarray

    @property
    def dim(self) -> int:
        return self.vectors.shape[0]

    def gram(self, weight: np.ndarray | None = None) -> np.ndarray:
        """Inner products of the formula vectors, optionally weighted per velocity."""
        w = 1.0 if weight is None else weight
        flat = self.vectors.reshape(self.dim, -1)
        wflat = (self.vectors * w).reshape(self.dim, -1)
        return flat @ wflat.T * self.support.dv

    def matrix(self) -> np.ndarray:
        """Orthonormal basis as columns of an ``(N K, N+4)`` matrix in the scaled l2 sense."""
        return self.orthonormal.reshape(self.dim, -1).T * math.sqrt(self.support.dv)


def kernel_basis(spec: MixtureSpec, c_bar: Sequence[float], support: VelocitySupport) -> KernelBasis:
    """Build the ``N+4`` kernel vectors from their closed formulas."""
    c = np.asarray(c_bar, dtype=float)
    if c.shape != (spec.n_species,) or np.any(c <= 0):
        raise DomainError("c_bar must hold one positive concentration per species")
    v = support.velocities
    n, K = spec.n_species, support.size
    m = spec.mass_array
    s = _sqrt_mu(spec, c, v)
    vecs = np.zeros((n + 4, n, K))
    for i in range(n):
        vecs[i, i] = s[i] / math.sqrt(c[i])
    rho = float(m @ c)
    for l in range(3):
        vecs[n + l] = v[:, l][None, :] * m[:, None] * s / math.sqrt(rho)
    v2 = np.sum(v * v, axis=1)
    vecs[n + 3] = (m[:, None] * v2[None, :] - 3.0) / math.sqrt(6.0) * s / math.sqrt(float(c.sum()))
    flat = vecs.reshape(n + 4, -1)
    G = flat @ flat.T * support.dv
    w, U = np.linalg.eigh(G)
    inv_sqrt = U @ np.diag(w**-0.5) @ U.T
    ortho = (inv_sqrt @ flat).reshape(vecs.shape)
    return KernelBasis(support, c, s, vecs, ortho)


@dataclass
class DiscreteOperator:
    """A dense operator on ``species x velocity`` values.

    ``matrix`` acts on vectors flattened species-major (``(N, K)`` →
    ``N*K``). For ``kind == "L"`` it has been symmetrized and
    ``asymmetry`` is the relative defect ``max|L - L^T| / max|L|`` before
    symmetrization.
    """

    matrix: np.ndarray
    kind: str
    spec: MixtureSpec
    c_bar: np.ndarray
    support: VelocitySupport
    asymmetry: float = 0.0
    rule: _lattice.LatticeRule | None = field(default=None, repr=False)

    @property
    def n_dof(self) -> int:
        return self.matrix.shape[0]

    def apply(self, f: np.ndarray) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        return (self.matrix @ f.reshape(-1)).reshape(f.shape)

    def inner(self, f: np.ndarray, g: np.ndarray) -> float:
        return float(np.sum(f * g)) * self.support.dv


def assemble_L(
    spec: MixtureSpec,
    c_bar: Sequence[float],
    grid: VelocityGrid,
    max_dof: int = MAX_DOF,
    rule: _lattice.LatticeRule | None = None,
) -> DiscreteOperator:
    """Dense linearized operator on the ball-restricted grid.

    Raises
    ------
    SizeError
        If ``N * K`` exceeds ``max_dof``.
    """
    spec.require_kinetic()
    support = ball_support(grid)
    n_dof = spec.n_species * support.size
    if n_dof > max_dof:
        raise SizeError(f"{n_dof} degrees of freedom exceed the budget of {max_dof}")
    rule = rule if rule is not None else _lattice.build_rule(spec, grid)
    c = np.asarray(c_bar, dtype=float)
    s = _sqrt_mu(spec, c, support.velocities)
    L = _lattice.assemble_dense(rule, s)
    asym = _lattice.symmetrize(L)
    return DiscreteOperator(L, "L", spec, c, support, asym, rule)


def project_pi_L(f: np.ndarray, basis: KernelBasis) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonal projection onto the kernel span in the grid inner product.

    Returns ``(pi_L f, f - pi_L f)``. Uses the orthonormalized basis, so
    the projection is idempotent to rounding.
    """
    f = np.asarray(f, dtype=float)
    B = basis.orthonormal.reshape(basis.dim, -1)
    flat = f.reshape(*f.shape[:-2], -1)
    coef = flat @ B.T * basis.support.dv
    par = (coef @ B).reshape(f.shape)
    return par, f - par


def project_pi_L_formula(f: np.ndarray, basis: KernelBasis, spec: MixtureSpec) -> np.ndarray:
    """The three-block closed formula for the projection, by quadrature.

    Concentration, momentum and energy blocks are computed separately as in
    the explicit expression; on a truncated grid this equals
    :func:`project_pi_L` up to the quadrature defect of the basis.
    """
    f = np.asarray(f, dtype=float)
    s = basis.sqrt_mu
    c = basis.c_bar
    v = basis.support.velocities
    dv = basis.support.dv
    m = spec.mass_array
    out = np.zeros_like(f)
    dens = np.sum(f * s, axis=-1) * dv / c
    out += dens[..., None] * s
    rho = float(m @ c)
    for k in range(3):
        mom = np.sum(m[:, None] * v[:, k] * f * s, axis=(-2, -1)) * dv
        out += (mom / rho)[..., None, None] * v[:, k] * m[:, None] * s
    e = (m[:, None] * np.sum(v * v, axis=1)[None, :] - 3.0) / math.sqrt(6.0) * s
    en = np.sum(e * f, axis=(-2, -1)) * dv
    out += (en / float(c.sum()))[..., None, None] * e
    return out


def kernel_dimension(L: DiscreteOperator, rtol: float = 1e-6) -> tuple[int, np.ndarray]:
    """Number of eigenvalues below ``rtol * |L|`` in magnitude, and the spectrum.

    ``|L|`` is the spectral norm. The full symmetric spectrum is computed.
    """
    ev = np.linalg.eigvalsh(L.matrix)
    nrm = float(np.max(np.abs(ev)))
    return int(np.sum(np.abs(ev) < rtol * nrm)), ev


@dataclass(frozen=True)
class GapEstimate:
    """Spectral-gap estimates of L on the orthogonal complement of its kernel.

    ``lambda_L`` is the plain gap; ``weighted`` minimizes
    ``-<L f, f> / |f|^2_{<v>^gamma}`` over the same complement. Both come
    from the same constrained eigen-solve, so they coincide exactly at
    ``gamma = 0``. ``rayleigh_min`` is the smallest sampled weighted
    quotient over random functions (never below ``weighted``).
    """

    lambda_L: float
    weighted: float
    rayleigh_min: float
    n_random: int


def _constrained_top(L: np.ndarray, Phi: np.ndarray, d: np.ndarray, seed: int) -> float:
    """Largest eigenvalue of ``D^{-1/2} L D^{-1/2}`` on ``(D^{-1/2} Phi)^perp``.

    This is the maximum of ``<L x, x> / <D x, x>`` over ``Phi^T x = 0``.
    """
    dm = 1.0 / np.sqrt(d)
    Q, _ = np.linalg.qr(Phi * dm[:, None])
    shift = 2.0 * float(np.max(np.abs(np.diag(L)))) + 1.0

    def mv(x):
        x = np.asarray(x).reshape(-1)
        y = x - Q @ (Q.T @ x)
        y = dm * (L @ (dm * y))
        y = y - Q @ (Q.T @ y)
        return y - shift * (Q @ (Q.T @ x))

    n = L.shape[0]
    op = LinearOperator((n, n), matvec=mv, dtype=float)
    v0 = rng_stream(seed, 0).standard_normal(n)
    vals = eigsh(op, k=3, which="LA", v0=v0, tol=1e-12, maxiter=20 * n, return_eigenvectors=False)
    return float(np.max(vals))


def estimate_spectral_gap(L: DiscreteOperator, basis: KernelBasis, n_random: int = 1000, seed: int = 0) -> GapEstimate:
    """Estimate the spectral gap of L and its ``<v>^gamma``-weighted variant.

    Raises
    ------
    InvariantFailure
        If either estimate is not positive.
    """
    Phi = basis.matrix()
    ones = np.ones(L.n_dof)
    weight = np.tile(basis.support.japanese(L.spec.gamma), L.spec.n_species)
    gap = -_constrained_top(L.matrix, Phi, ones, seed)
    if L.spec.gamma == 0.0:
        weighted = gap
    else:
        weighted = -_constrained_top(L.matrix, Phi, weight, seed)
    rng = rng_stream(seed, 1)
    X = rng.standard_normal((n_random, L.n_dof))
    X -= (X @ Phi) @ Phi.T
    num = -np.einsum("ij,ij->i", X @ L.matrix, X)
    den = np.einsum("ij,ij->i", X * weight, X)
    rq = float(np.min(num / den)) if n_random else float("nan")
    if not (gap > 0 and weighted > 0):
        raise InvariantFailure(f"nonpositive spectral gap estimate ({gap}, {weighted}); refine the grid or enlarge v_max")
    return GapEstimate(gap, weighted, rq, n_random)


def gamma_operator(rule: _lattice.LatticeRule, sqrt_mu: np.ndarray, f: np.ndarray, g: np.ndarray) -> np.ndarray:
    """``Gamma_i(f, g) = mu_i^{-1/2} [Q(mu^{1/2} f, mu^{1/2} g) + Q(mu^{1/2} g, mu^{1/2} f)]_i / 2``."""
    a = sqrt_mu * f
    b = sqrt_mu * g
    q = _lattice.collide(rule, a, b) + _lattice.collide(rule, b, a)
    return 0.5 * q / sqrt_mu


def apply_L_eps(rule: _lattice.LatticeRule, sqrt_mu: np.ndarray, M_eps: np.ndarray, f: np.ndarray) -> np.ndarray:
    """``L^eps_i(f) = mu_i^{-1/2} [Q(M^eps, mu^{1/2} f) + Q(mu^{1/2} f, M^eps)]_i`` (matrix-free)."""
    a = sqrt_mu * f
    return (_lattice.collide(rule, M_eps, a) + _lattice.collide(rule, a, M_eps)) / sqrt_mu


def _grid_norm(f: np.ndarray, dv: float) -> float:
    return math.sqrt(float(np.sum(f * f)) * dv)


def gamma_orthogonality_check(
    spec: MixtureSpec,
    g: np.ndarray,
    h: np.ndarray,
    basis: KernelBasis,
    rule: _lattice.LatticeRule | None = None,
) -> tuple[float, float]:
    """Return ``(|pi_L Gamma(g, h)|, |Gamma(g, h)|)`` on the ball support."""
    rule = rule if rule is not None else _lattice.build_rule(spec, basis.support.grid)
    gam = gamma_operator(rule, basis.sqrt_mu, g, h)
    par, _ = project_pi_L(gam, basis)
    dv = basis.support.dv
    return _grid_norm(par, dv), _grid_norm(gam, dv)


def l_eps_orthogonality_check(
    spec: MixtureSpec,
    f: np.ndarray,
    basis: KernelBasis,
    c: Sequence[float],
    u: np.ndarray,
    T: float,
    eps: float,
    rule: _lattice.LatticeRule | None = None,
) -> tuple[float, float]:
    """Return ``(|pi_L L^eps f|, |L^eps f|)`` for the local Maxwellian ``(c, eps u, T)``."""
    rule = rule if rule is not None else _lattice.build_rule(spec, basis.support.grid)
    v = basis.support.velocities
    u = np.asarray(u, dtype=float).reshape(spec.n_species, 3)
    M = np.stack(
        [eval_maxwellian(MaxwellianParams(float(c[i]), spec.masses[i], tuple(u[i]), T, eps), v) for i in range(spec.n_species)]
    )
    le = apply_L_eps(rule, basis.sqrt_mu, M, f)
    par, _ = project_pi_L(le, basis)
    dv = basis.support.dv
    return _grid_norm(par, dv), _grid_norm(le, dv)


def project_pi_T(f_field: np.ndarray, basis: KernelBasis) -> np.ndarray:
    """Spatial average of ``pi_L(f(x))`` over a periodic grid.

    ``f_field`` has shape ``(*spatial, N, K)``. The spatial domain is the
    unit torus (measure 1), so the integral over x is the mean over the
    spatial grid points.
    """
    f = np.asarray(f_field, dtype=float)
    par, _ = project_pi_L(f, basis)
    return par.reshape(-1, *par.shape[-2:]).mean(axis=0)


def norm_equivalence_constant(basis: KernelBasis, gamma: float) -> float:
    """``C_pi = (N+4) max_{k,l} |<phi_k, phi_l>_{<v>^gamma}|`` on the grid.

    Evaluated with the grid-orthonormalized basis, for which
    ``|pi_L f|^2_{<v>^gamma} <= C_pi |pi_L f|^2`` holds exactly.
    """
    w = basis.support.japanese(gamma)
    B = basis.orthonormal.reshape(basis.dim, -1)
    wB = (basis.orthonormal * w).reshape(basis.dim, -1)
    G = B @ wB.T * basis.support.dv
    return basis.dim * float(np.max(np.abs(G)))


def spectrum_csv(eigenvalues: np.ndarray) -> str:
    """CSV (index, eigenvalue) of a spectrum sorted in decreasing order."""
    ev = np.sort(np.asarray(eigenvalues))[::-1]
    return csv_text(["index", "eigenvalue"], enumerate(ev))


def kernel_defect_json(L: DiscreteOperator, basis: KernelBasis, kernel_dim: int | None = None,
                       gap: GapEstimate | None = None) -> str:
    """JSON report of the kernel defect ``max_k |L phi_k|`` and related figures."""
    Phi = basis.orthonormal.reshape(basis.dim, -1)
    lphi = [_grid_norm(L.apply(p.reshape(L.spec.n_species, -1)), L.support.dv) for p in Phi]
    rep = {
        "n_dof": L.n_dof,
        "n_v": L.support.grid.n_v,
        "v_max": L.support.grid.v_max,
        "asymmetry_before_symmetrization": L.asymmetry,
        "max_norm_L_phi": max(lphi),
        "norm_L_phi": lphi,
        "basis_gram_defect": float(np.max(np.abs(basis.gram() - np.eye(basis.dim)))),
    }
    if kernel_dim is not None:
        rep["kernel_dimension"] = kernel_dim
    if gap is not None:
        rep["lambda_L"] = gap.lambda_L
        rep["lambda_L_weighted"] = gap.weighted
    return json.dumps(rep, indent=2, sort_keys=True)
