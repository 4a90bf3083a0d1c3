"""Perturbative non-isothermal Maxwell-Stefan solver on a periodic box.

Unknowns are perturbations around the constant state ``(c_bar, 0, 1)``:

    c = c_bar + lam c~,   U = lam U~ (U~ orthogonal to 1),   T = 1 + lam T~.

The total concentration solves the heat equation ``d_t c~_tot = alpha Lap c~_tot``
and is advanced exactly in Fourier space. Within a time step the remaining
unknowns are found by a fixed-point (Picard) iteration that freezes
coefficients at the previous iterate:

* temperature: backward-Euler step of the linear advection-reaction equation
  driven by the new ``c~_tot``;
* velocity: ``U~ = T^{1-gamma/2} A(c)^+ (grad c~ - grad c~_tot c / c_tot)``;
* concentrations: linear cross-diffusion step with the constant-coefficient
  principal part ``D_MS`` (the operator linearized at ``c_bar``) implicit and
  the remainder explicit in the iterate. The Fick part of the flux uses the
  exact time integral of ``alpha grad c~_tot`` over the step, so the species
  sum reproduces the exact heat solution to rounding.

Space is the unit torus ``[0, 1)^d`` discretized by a Fourier pseudo-spectral
method; nonlinear terms are formed on a 3/2-padded grid.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ._util import csv_text
from .diffusion import build_delta
from .errors import (
    CompatibilityError,
    DomainError,
    InitialDataError,
    InvariantFailure,
    IterationDivergenceError,
    ParameterError,
    PositivityError,
    SolvabilityError,
)
from .mixture import MixtureSpec
from .ms_matrix import DEFAULT_TAU_SOLV, estimate_spectral_constants, ms_matrix_batch, pinv_batch

__all__ = [
    "PeriodicGrid",
    "PerturbationState",
    "MSConstants",
    "EnergyReport",
    "MSRunConfig",
    "MSRunResult",
    "ms_constants",
    "profile_field",
    "make_well_prepared_initial_data",
    "heat_solution",
    "step_ctot",
    "step_temperature",
    "recover_velocity",
    "step_concentrations",
    "picard_advance",
    "energy_report",
    "ctot_T_residual",
    "fick_residual",
    "parabolic_dt",
    "smallness_ratio",
    "run_simulation",
]


# ----------------------------------------------------------------------------
# Periodic grid and spectral operators
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class PeriodicGrid:
    """Uniform grid on the unit torus ``[0, 1)^dim`` with ``n_x`` points per axis."""

    dim: int
    n_x: int

    def __post_init__(self) -> None:
        if self.dim not in (1, 2, 3):
            raise ParameterError("dim must be 1, 2 or 3")
        if self.n_x < 4 or self.n_x % 2:
            raise ParameterError("n_x must be even and at least 4")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n_x,) * self.dim

    @property
    def spacing(self) -> float:
        return 1.0 / self.n_x

    @property
    def n_fine(self) -> int:
        """Padded size for 3/2-rule dealiasing (rounded up to even)."""
        m = (3 * self.n_x + 1) // 2
        return m + (m % 2)

    def axes(self) -> tuple[int, ...]:
        return tuple(range(-self.dim, 0))

    def points(self) -> np.ndarray:
        """Coordinates of shape ``(dim, *shape)``."""
        x = np.arange(self.n_x) / self.n_x
        return np.stack(np.meshgrid(*([x] * self.dim), indexing="ij"))

    def _k_int(self) -> np.ndarray:
        k = np.fft.fftfreq(self.n_x, 1.0 / self.n_x)
        k[self.n_x // 2] = 0.0  # drop the Nyquist mode
        return k

    def wavenumbers(self) -> list[np.ndarray]:
        """Angular wavenumbers per axis, broadcastable to ``shape``."""
        k = 2.0 * np.pi * self._k_int()
        out = []
        for a in range(self.dim):
            sh = [1] * self.dim
            sh[a] = self.n_x
            out.append(k.reshape(sh))
        return out

    def k2(self) -> np.ndarray:
        return sum(k**2 for k in self.wavenumbers()) * np.ones(self.shape)

    def nyquist_mask(self) -> np.ndarray:
        """True on retained modes (all modes except any Nyquist index)."""
        keep = np.ones(self.n_x, dtype=bool)
        keep[self.n_x // 2] = False
        m = np.ones(self.shape, dtype=bool)
        for a in range(self.dim):
            sh = [1] * self.dim
            sh[a] = self.n_x
            m = m & keep.reshape(sh)
        return m

    def fft(self, f: np.ndarray) -> np.ndarray:
        return np.fft.fftn(f, axes=self.axes())

    def ifft(self, fh: np.ndarray) -> np.ndarray:
        return np.fft.ifftn(fh, axes=self.axes()).real

    def filter(self, f: np.ndarray) -> np.ndarray:
        """Remove the Nyquist modes of ``f``."""
        return self.ifft(self.fft(f) * self.nyquist_mask())

    def grad(self, f: np.ndarray) -> np.ndarray:
        """Spectral gradient; the derivative axis is inserted before the spatial axes."""
        fh = self.fft(f)
        return np.stack([self.ifft(1j * k * fh) for k in self.wavenumbers()], axis=-self.dim - 1)

    def div(self, F: np.ndarray) -> np.ndarray:
        """Spectral divergence of a field whose derivative axis precedes the spatial axes."""
        ks = self.wavenumbers()
        Fh = self.fft(F)
        acc = sum(1j * ks[a] * np.take(Fh, a, axis=-self.dim - 1) for a in range(self.dim))
        return self.ifft(acc)

    def derivative(self, f: np.ndarray, beta: Sequence[int]) -> np.ndarray:
        """``d^beta f`` for a multi-index ``beta`` of length ``dim``."""
        sym = np.ones(self.shape, dtype=complex)
        for k, b in zip(self.wavenumbers(), beta):
            sym = sym * (1j * k) ** b
        return self.ifft(sym * self.fft(f))

    def _index_maps(self) -> tuple[np.ndarray, np.ndarray]:
        ki = np.fft.fftfreq(self.n_x, 1.0 / self.n_x).astype(int)
        keep = np.flatnonzero(np.abs(ki) < self.n_x // 2)
        return keep, ki[keep] % self.n_fine

    def to_fine(self, f: np.ndarray) -> np.ndarray:
        """Trigonometric interpolation onto the padded grid."""
        keep, dst = self._index_maps()
        fh = self.fft(f)
        lead = f.shape[: f.ndim - self.dim]
        out = np.zeros(lead + (self.n_fine,) * self.dim, dtype=complex)
        src_idx = (Ellipsis,) + np.ix_(*([keep] * self.dim))
        dst_idx = (Ellipsis,) + np.ix_(*([dst] * self.dim))
        out[dst_idx] = fh[src_idx]
        scale = (self.n_fine / self.n_x) ** self.dim
        return np.fft.ifftn(out, axes=self.axes()).real * scale

    def from_fine(self, g: np.ndarray) -> np.ndarray:
        """Truncate a padded-grid field to the retained modes of this grid."""
        keep, dst = self._index_maps()
        gh = np.fft.fftn(g, axes=self.axes())
        lead = g.shape[: g.ndim - self.dim]
        out = np.zeros(lead + self.shape, dtype=complex)
        src_idx = (Ellipsis,) + np.ix_(*([dst] * self.dim))
        dst_idx = (Ellipsis,) + np.ix_(*([keep] * self.dim))
        out[dst_idx] = gh[src_idx]
        scale = (self.n_x / self.n_fine) ** self.dim
        return self.ifft(out) * scale

    def mean(self, f: np.ndarray) -> np.ndarray:
        return f.mean(axis=self.axes())

    def l2_sq(self, f: np.ndarray, weight: np.ndarray | float = 1.0) -> float:
        """``int weight |f|^2 dx`` over the unit torus (sums every leading axis)."""
        return float(np.sum(self.mean(weight * f * f)))

    def hs_sq(self, f: np.ndarray, s: int, weight: np.ndarray | float = 1.0) -> float:
        """``sum_{|beta| <= s} int weight |d^beta f|^2 dx``."""
        total = 0.0
        for beta in _multi_indices(self.dim, s):
            d = f if not any(beta) else self.derivative(f, beta)
            total += self.l2_sq(d, weight)
        return total


def _multi_indices(dim: int, s: int):
    for beta in itertools.product(range(s + 1), repeat=dim):
        if sum(beta) <= s:
            yield beta


# ----------------------------------------------------------------------------
# State, constants and initial data
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class PerturbationState:
    """Perturbation fields and the parameters of the background state.

    Shapes: ``c_tilde`` is ``(N, *grid.shape)``, ``T_tilde`` is
    ``grid.shape`` and ``U_tilde`` is ``(N, dim, *grid.shape)`` with
    ``sum_i U~_i = 0`` pointwise.
    """

    grid: PeriodicGrid
    c_bar: np.ndarray
    lam: float
    alpha: float
    delta: np.ndarray
    gamma: float
    c_tilde: np.ndarray
    T_tilde: np.ndarray
    U_tilde: np.ndarray
    t: float = 0.0
    picard_differences: tuple[float, ...] = ()

    @property
    def n_species(self) -> int:
        return self.c_bar.size

    @property
    def ctot_tilde(self) -> np.ndarray:
        return self.c_tilde.sum(axis=0)

    @property
    def c_bar_tot(self) -> float:
        return float(self.c_bar.sum())

    def concentrations(self) -> np.ndarray:
        return _bcast(self.c_bar, self.grid) + self.lam * self.c_tilde

    def temperature(self) -> np.ndarray:
        return 1.0 + self.lam * self.T_tilde

    def positivity_margins(self) -> tuple[float, float]:
        return float(self.concentrations().min()), float(self.temperature().min())


def _bcast(v: np.ndarray, grid: PeriodicGrid) -> np.ndarray:
    return np.asarray(v, dtype=float).reshape((-1,) + (1,) * grid.dim)


@dataclass(frozen=True)
class MSConstants:
    """Constants of the energy functional and the dissipation rate."""

    lambda_a: float
    chi: float
    d1: float
    d2: float
    lambda_a_source: str

    def to_dict(self) -> dict:
        return asdict(self)


def ms_constants(c_bar: Sequence[float], alpha: float, gamma: float, lambda_a: float, source: str = "given") -> MSConstants:
    """``chi``, ``d1`` and ``d2`` from ``lambda_A``, ``c_bar``, ``alpha`` and ``gamma``."""
    c = np.asarray(c_bar, dtype=float)
    ct = float(c.sum())
    cm2 = float(c.min()) ** 2
    f = 3.0 * 1.5 ** (1.0 - gamma / 2.0)
    chi = 4.0 / (3.0 * ct**2) + f / (alpha * lambda_a * cm2)
    d1 = lambda_a * cm2 / 3.0
    d2 = alpha / ct + 2.0 * alpha / (3.0 * ct**2) + f / (2.0 * lambda_a * cm2)
    return MSConstants(float(lambda_a), chi, d1, d2, source)


def profile_field(grid: PeriodicGrid, modes: Sequence[dict]) -> np.ndarray:
    """Sum of named shapes on the grid.

    Each mode is ``{"shape": "constant", "amplitude": a}`` or
    ``{"shape": "cosine", "amplitude": a, "k": [k1, ...], "phase": p}``
    giving ``a cos(2 pi k.x + p)``.
    """
    x = grid.points()
    out = np.zeros(grid.shape)
    for m in modes:
        shape = m.get("shape", "cosine")
        a = float(m.get("amplitude", 0.0))
        if shape == "constant":
            out = out + a
        elif shape == "cosine":
            k = list(m.get("k", [1]))
            k = k + [0] * (grid.dim - len(k))
            if len(k) != grid.dim:
                raise ParameterError(f"wavevector {m.get('k')} does not match dim {grid.dim}")
            phase = float(m.get("phase", 0.0))
            arg = sum(2.0 * np.pi * kk * x[a] for a, kk in enumerate(k))
            out = out + a * np.cos(arg + phase)
        else:
            raise ParameterError(f"unknown profile shape {shape!r}")
    return out


def _grad_floor(grid: PeriodicGrid, c: np.ndarray) -> float:
    """Rounding floor of spectral gradients of O(``max c``) fields."""
    k_max = 2.0 * np.pi * (grid.n_x // 2) * np.sqrt(grid.dim)
    return 1e3 * np.finfo(float).eps * k_max * float(np.max(np.abs(c)))


def _pointwise_velocity(c: np.ndarray, T: np.ndarray, rhs: np.ndarray, delta: np.ndarray, gamma: float,
                        tau_solv: float | None = None, scale: float | None = None,
                        atol: float = 0.0) -> np.ndarray:
    """``T^{1-gamma/2} A(c)^+ rhs`` pointwise; ``rhs`` is ``(N, dim, *spatial)``.

    ``scale`` is the magnitude the solvability defect is measured against; it
    defaults to ``max |rhs|`` and should be the size of the separate terms when
    ``rhs`` is a difference that can cancel. ``atol`` is the rounding floor of
    the spectral gradients entering ``rhs``.
    """
    if tau_solv is not None:
        if scale is None:
            scale = float(np.max(np.abs(rhs))) if rhs.size else 0.0
        defect = float(np.max(np.abs(rhs.sum(axis=0)))) if rhs.size else 0.0
        if defect > tau_solv * max(scale, np.finfo(float).tiny) + atol:
            raise SolvabilityError(f"flux-force solvability violated: |sum rhs| = {defect:.3e} (scale {scale:.3e})")
    a = ms_matrix_batch(np.moveaxis(c, 0, -1), delta)
    ap = pinv_batch(a)  # (*spatial, N, N)
    r = np.moveaxis(rhs, (0, 1), (-1, -2))  # (*spatial, dim, N)
    u = np.einsum("...ij,...aj->...ai", ap, r)
    u = np.moveaxis(u, (-1, -2), (0, 1))
    return u * T ** (1.0 - gamma / 2.0)


def make_well_prepared_initial_data(
    c_tilde_profile: np.ndarray,
    lam: float,
    c_bar: Sequence[float],
    alpha: float,
    spec: MixtureSpec,
    tau_solv: float = DEFAULT_TAU_SOLV,
) -> PerturbationState:
    """Build initial data satisfying positivity and both compatibility relations.

    ``T~`` is set from ``(c_bar_tot + lam c~_tot)(1 + lam T~) = K`` with the
    constant ``K`` chosen so that ``T~`` has zero mean, and ``U~`` from the
    flux-force relation evaluated with that temperature.

    Raises
    ------
    InitialDataError
        If ``c_bar + lam c~`` is not positive.
    CompatibilityError
        If the flux-force right-hand side fails the solvability condition.
    """
    c_tilde = np.asarray(c_tilde_profile, dtype=float)
    c_bar = np.asarray(c_bar, dtype=float)
    if c_tilde.ndim < 2 or c_tilde.shape[0] != spec.n_species:
        raise DomainError("c_tilde_profile must have shape (N, *spatial)")
    if c_bar.shape != (spec.n_species,) or np.any(c_bar <= 0):
        raise DomainError("c_bar must be a positive N-vector")
    if not (0.0 < lam <= 1.0):
        raise ParameterError("lambda must lie in (0, 1]")
    if not alpha > 0:
        raise ParameterError("alpha must be positive")
    sh = c_tilde.shape[1:]
    if len(set(sh)) != 1:
        raise DomainError("the grid must have the same size on every axis")
    grid = PeriodicGrid(len(sh), sh[0])
    c_tilde = grid.filter(c_tilde)
    c = _bcast(c_bar, grid) + lam * c_tilde
    if np.any(c <= 0):
        raise InitialDataError(f"c_bar + lam c~ must be positive (min {float(c.min()):.3e})")
    delta = build_delta(spec).delta
    ctot = c.sum(axis=0)
    K = 1.0 / grid.mean(1.0 / ctot)
    T_tilde = grid.filter((K / ctot - 1.0) / lam)
    T = 1.0 + lam * T_tilde
    if np.any(T <= 0):
        raise InitialDataError("temperature must be positive")
    term_t = c[:, None] * grid.grad(T_tilde)[None]
    term_c = T[None, None] * grid.grad(c_tilde)
    rhs = term_t + term_c
    scale = float(np.max(np.abs(term_t)) + np.max(np.abs(term_c)))
    try:
        U = _pointwise_velocity(c, T, rhs, delta, spec.gamma, tau_solv, scale, _grad_floor(grid, c))
    except SolvabilityError as exc:
        raise CompatibilityError(str(exc)) from exc
    # The flux-force relation gives T^{gamma/2} A U = rhs.
    U = U * T ** (-1.0)
    return PerturbationState(grid, c_bar, float(lam), float(alpha), delta, spec.gamma, c_tilde, T_tilde, U)


# ----------------------------------------------------------------------------
# Sub-steps
# ----------------------------------------------------------------------------


def heat_solution(grid: PeriodicGrid, ctot0: np.ndarray, alpha: float, t: float) -> np.ndarray:
    """Exact solution of ``d_t f = alpha Lap f`` at time ``t``."""
    return grid.ifft(grid.fft(ctot0) * np.exp(-alpha * grid.k2() * t) * grid.nyquist_mask())


def step_ctot(state: PerturbationState, dt: float) -> np.ndarray:
    """Advance ``c~_tot`` by ``dt`` with the exact Fourier heat propagator."""
    return heat_solution(state.grid, state.ctot_tilde, state.alpha, dt)


def _fick_increment(grid: PeriodicGrid, ctot0: np.ndarray, alpha: float, dt: float) -> np.ndarray:
    """``int_0^dt alpha grad c~_tot(s) ds`` for heat-equation evolution from ``ctot0``."""
    k2 = grid.k2()
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(k2 > 0, -np.expm1(-alpha * k2 * dt) / np.where(k2 > 0, k2, 1.0), 0.0)
    ch = grid.fft(ctot0) * w * grid.nyquist_mask()
    return np.stack([grid.ifft(1j * k * ch) for k in grid.wavenumbers()])


def step_temperature(
    state_prev_iter: PerturbationState,
    ctot_new: np.ndarray,
    dt: float,
    T_start: np.ndarray | None = None,
    forcing: Callable[[float, np.ndarray], np.ndarray] | None = None,
    t_new: float | None = None,
) -> np.ndarray:
    """One iterate of the backward-Euler temperature step.

    Solves ``T~ = T~_start + dt R`` where ``R`` collects

        (2 alpha/3) div[(1 + lam T~^n)/c_tot^n grad c~_tot]
        + (2 alpha lam/3) (1 + lam T~^n)/(c_tot^n)^2 |grad c~_tot|^2
        + alpha lam grad c~_tot . grad T~^n / c_tot^n  (+ forcing)

    with the new total concentration ``ctot_new`` and the coefficients and
    ``grad T~^n`` taken from ``state_prev_iter``. Iterating to a fixed point
    gives the backward-Euler step. ``forcing(t, x)`` adds a source term.

    Raises
    ------
    PositivityError
        If ``1 + lam T~`` is not positive for the input or the result.
    """
    s = state_prev_iter
    g, lam, a = s.grid, s.lam, s.alpha
    T0 = s.T_tilde if T_start is None else T_start
    Tn = s.temperature()
    ctn = s.c_bar_tot + lam * s.ctot_tilde
    if np.any(Tn <= 0) or np.any(ctn <= 0):
        raise PositivityError("positivity lost before the temperature step; halve dt")
    Tf = g.to_fine(Tn)
    cf = g.to_fine(ctn)
    gc = g.to_fine(g.grad(ctot_new))
    gT = g.to_fine(g.grad(s.T_tilde))
    flux = (Tf / cf)[None] * gc
    src = (2.0 * a * lam / 3.0) * Tf / cf**2 * np.sum(gc * gc, axis=0) + a * lam * np.sum(gc * gT, axis=0) / cf
    rhs = (2.0 * a / 3.0) * g.div(g.from_fine(flux)) + g.from_fine(src)
    if forcing is not None:
        t = s.t + dt if t_new is None else t_new
        rhs = rhs + g.filter(forcing(t, g.points()))
    T_new = T0 + dt * rhs
    if np.any(1.0 + lam * T_new <= 0):
        raise PositivityError("temperature lost positivity; halve dt")
    return T_new


def recover_velocity(state: PerturbationState, tau_solv: float = DEFAULT_TAU_SOLV) -> tuple[np.ndarray, np.ndarray]:
    """Velocity perturbations ``(U~, u~)`` of a state.

    ``U~ = (1 + lam T~)^{1-gamma/2} A(c)^+ [grad c~ - grad c~_tot c / c_tot]``
    pointwise, and ``u~ = U~* - alpha grad c~_tot / c_tot 1`` with
    ``U~* = U~ - <c, U~>/c_tot 1``.

    Raises
    ------
    SolvabilityError
        If the flux-force right-hand side is not orthogonal to ``1``.
    PositivityError
        If concentrations or temperature are not positive.
    """
    g = state.grid
    c = state.concentrations()
    T = state.temperature()
    if np.any(c <= 0) or np.any(T <= 0):
        raise PositivityError("velocity recovery needs positive c and T")
    ctot = c.sum(axis=0)
    gct = g.grad(state.ctot_tilde)
    gc = g.grad(state.c_tilde)
    drift = c[:, None] * (gct / ctot)[None]
    rhs = gc - drift
    scale = float(np.max(np.abs(gc)) + np.max(np.abs(drift)))
    U = _pointwise_velocity(c, T, rhs, state.delta, state.gamma, tau_solv, scale, _grad_floor(g, c))
    U = U - U.mean(axis=0, keepdims=True)
    Ustar = U - (np.sum(c[:, None] * U, axis=0) / ctot)[None]
    u = Ustar - (state.alpha * gct / ctot)[None]
    return U, u


class _Implicit:
    """Cached solves of ``(I + dt |k|^2 D_MS) x = b`` per wavevector."""

    def __init__(self, state: PerturbationState, dt: float):
        self.key = (state.grid, dt, tuple(state.c_bar), state.delta.tobytes(), state.gamma)
        n = state.n_species
        cb = state.c_bar
        ct = cb.sum()
        ap = pinv_batch(ms_matrix_batch(cb, state.delta))
        left = np.diag(cb) @ (np.eye(n) - np.outer(np.ones(n), cb) / ct)
        right = np.eye(n) - np.outer(cb, np.ones(n)) / ct
        self.D = -left @ ap @ right
        k2 = state.grid.k2()
        mats = np.eye(n) + dt * k2[..., None, None] * self.D
        self.inv = np.linalg.inv(mats)
        self.k2 = k2

    def apply_D(self, ch: np.ndarray) -> np.ndarray:
        return np.einsum("ij,j...->i...", self.D, ch) * self.k2

    def solve(self, bh: np.ndarray) -> np.ndarray:
        return np.einsum("...ij,j...->i...", self.inv, bh)


_IMPLICIT_CACHE: dict = {}


def _implicit(state: PerturbationState, dt: float) -> _Implicit:
    key = (state.grid, dt, tuple(state.c_bar), state.delta.tobytes(), state.gamma)
    imp = _IMPLICIT_CACHE.get(key)
    if imp is None:
        if len(_IMPLICIT_CACHE) > 16:
            _IMPLICIT_CACHE.clear()
        imp = _IMPLICIT_CACHE[key] = _Implicit(state, dt)
    return imp


def step_concentrations(
    state_prev_iter: PerturbationState,
    ctot_new: np.ndarray,
    T_new: np.ndarray,
    dt: float,
    c_start: np.ndarray | None = None,
) -> np.ndarray:
    """One iterate of the concentration step.

    Solves, per Fourier mode,

        (I + dt|k|^2 D_MS) c^ = c^_start + dt [R(c~^n) + |k|^2 D_MS c~^n] + F^

    where ``R = -div[(diag(c) - c c^T/c_tot) U~]`` is evaluated with
    coefficients frozen at ``state_prev_iter`` (and ``U~`` from its
    concentration gradients and ``T_new``), and ``F = div[c/c_tot G]`` is
    the Fick increment with ``G`` the exact time integral of
    ``alpha grad c~_tot`` over the step. The species sum of the result is
    ``ctot_new`` to rounding and every species mean is preserved.

    Raises
    ------
    PositivityError
        If the result violates ``c_bar + lam c~ > 0``.
    """
    s = state_prev_iter
    g, lam = s.grid, s.lam
    c0 = s.c_tilde if c_start is None else c_start
    ctot_start = c0.sum(axis=0)
    c = s.concentrations()
    if np.any(c <= 0):
        raise PositivityError("concentrations lost positivity; halve dt")
    cf = g.to_fine(c)
    ctf = cf.sum(axis=0)
    Tf = g.to_fine(1.0 + lam * T_new)
    gradc = g.to_fine(g.grad(s.c_tilde))
    gct = gradc.sum(axis=0)
    rhs = gradc - cf[:, None] * (gct / ctf)[None]
    U = _pointwise_velocity(cf, Tf, rhs, s.delta, s.gamma)
    J = cf[:, None] * (U - (np.sum(cf[:, None] * U, axis=0) / ctf)[None])
    G = g.to_fine(_fick_increment(g, ctot_start, s.alpha, dt))
    fick = (cf / ctf)[:, None] * G[None]
    R = -g.div(g.from_fine(J))
    F = g.div(g.from_fine(fick))
    imp = _implicit(s, dt)
    ch = g.fft(s.c_tilde)
    bh = g.fft(c0) + dt * (g.fft(R) + imp.apply_D(ch)) + g.fft(F)
    c_new = g.ifft(imp.solve(bh) * g.nyquist_mask())
    if np.any(_bcast(s.c_bar, g) + lam * c_new <= 0):
        raise PositivityError("concentrations lost positivity; halve dt")
    return c_new


def picard_advance(
    state: PerturbationState,
    dt: float,
    max_iter: int = 50,
    tol: float = 1e-11,
    forcing: Callable[[float, np.ndarray], np.ndarray] | None = None,
) -> PerturbationState:
    """Advance one time step by fixed-point iteration with frozen coefficients.

    Each iteration runs the temperature step, recovers the velocity and runs
    the concentration step, all with coefficients from the previous iterate.
    Iteration stops when the sup-norm difference of successive ``(c~, T~)``
    iterates is below ``tol`` (relative to ``1 + sup|(c~, T~)|``). The
    returned state records the difference sequence.

    Raises
    ------
    IterationDivergenceError
        If the differences do not fall below ``tol`` within ``max_iter``
        iterations or grow by more than a factor 1e6.
    """
    if not dt > 0:
        raise ParameterError("dt must be positive")
    ctot_new = step_ctot(state, dt)
    cur = state
    diffs: list[float] = []
    scale = 1.0 + max(float(np.max(np.abs(state.c_tilde))), float(np.max(np.abs(state.T_tilde))))
    for _ in range(max_iter):
        try:
            T_new = step_temperature(cur, ctot_new, dt, T_start=state.T_tilde, forcing=forcing, t_new=state.t + dt)
            c_new = step_concentrations(cur, ctot_new, T_new, dt, c_start=state.c_tilde)
        except PositivityError as exc:
            if diffs:
                raise IterationDivergenceError(f"iterate lost positivity after {len(diffs)} iterations: {exc}; "
                                               "reduce dt or the initial amplitude", diffs) from exc
            raise
        d = max(float(np.max(np.abs(c_new - cur.c_tilde))), float(np.max(np.abs(T_new - cur.T_tilde))))
        diffs.append(d)
        cur = replace(cur, c_tilde=c_new, T_tilde=T_new)
        if not math.isfinite(d) or (len(diffs) > 1 and d > 1e6 * max(diffs[0], 1e-300)):
            break
        if d <= tol * scale:
            U, _ = recover_velocity(cur)
            return replace(cur, U_tilde=U, t=state.t + dt, picard_differences=tuple(diffs))
    raise IterationDivergenceError(
        f"fixed-point iteration did not converge in {len(diffs)} iterations (last difference {diffs[-1]:.3e}); "
        "reduce dt or the initial amplitude",
        diffs,
    )


# ----------------------------------------------------------------------------
# Diagnostics
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class EnergyReport:
    """Energy, dissipation and residual diagnostics of a state."""

    E_s: float
    D_s: float
    s: int
    chi: float
    d1: float
    d2: float
    residual_fick: float
    residual_fluxforce: float
    residual_ctotT: float
    min_c: float
    min_T: float


def ctot_T_residual(state: PerturbationState) -> float:
    """``max |grad((c_bar_tot + lam c~_tot)(1 + lam T~))|`` with a dealiased product."""
    g = state.grid
    ct = g.to_fine(state.c_bar_tot + state.lam * state.ctot_tilde)
    T = g.to_fine(state.temperature())
    return float(np.max(np.abs(g.grad(g.from_fine(ct * T)))))


def fick_residual(state: PerturbationState) -> float:
    """``max |sum_i c_i u_i + alpha grad c_tot|`` (full fields, pointwise)."""
    _, u = recover_velocity(state)
    c = state.concentrations()
    lam = state.lam
    flux = np.sum(c[:, None] * (lam * u), axis=0) + state.alpha * lam * state.grid.grad(state.ctot_tilde)
    return float(np.max(np.abs(flux)))


def _fluxforce_residual(state: PerturbationState, U: np.ndarray) -> float:
    """``max |T grad c~ + c grad T~ - T^{gamma/2} A(c) U~|``."""
    g = state.grid
    c = state.concentrations()
    T = state.temperature()
    lhs = T[None, None] * g.grad(state.c_tilde) + c[:, None] * g.grad(state.T_tilde)[None]
    a = ms_matrix_batch(np.moveaxis(c, 0, -1), state.delta)
    AU = np.einsum("...ij,...aj->...ai", a, np.moveaxis(U, (0, 1), (-1, -2)))
    AU = np.moveaxis(AU, (-1, -2), (0, 1))
    return float(np.max(np.abs(lhs - T ** (state.gamma / 2.0) * AU)))


def energy_report(state: PerturbationState, s: int, constants: MSConstants) -> EnergyReport:
    """``E_s``, ``D_s`` and residuals of a state.

    ``E_s = |c~|^2_{H^s(1/c_bar)} + |T~|^2_{H^s} + chi |c~_tot|^2_{H^s}`` and
    ``D_s = d1 |U~|^2_{H^s(omega)} + d2 |grad c~_tot|^2_{H^s}`` with
    ``omega = (1 + lam T~)^{gamma/2 - 1}``. Weighted norms apply the weight
    to each derivative ``d^beta`` before integrating.
    """
    if s < 0 or int(s) != s:
        raise ParameterError("s must be a nonnegative integer")
    g = state.grid
    w_c = _bcast(1.0 / state.c_bar, g)
    E = g.hs_sq(state.c_tilde, s, w_c) + g.hs_sq(state.T_tilde, s) + constants.chi * g.hs_sq(state.ctot_tilde, s)
    U, _ = recover_velocity(state)
    omega = state.temperature() ** (state.gamma / 2.0 - 1.0)
    D = constants.d1 * g.hs_sq(U, s, omega) + constants.d2 * g.hs_sq(g.grad(state.ctot_tilde), s)
    min_c, min_T = state.positivity_margins()
    return EnergyReport(
        E_s=E,
        D_s=D,
        s=int(s),
        chi=constants.chi,
        d1=constants.d1,
        d2=constants.d2,
        residual_fick=fick_residual(state),
        residual_fluxforce=_fluxforce_residual(state, U),
        residual_ctotT=ctot_T_residual(state),
        min_c=min_c,
        min_T=min_T,
    )


def smallness_ratio(state: PerturbationState, lambda_a_samples: int = 1000, seed: int = 0):
    """``E_0^{1/2} / min c_bar`` of a state, with the constants used to evaluate it.

    ``lambda_A`` is estimated over the box spanned by ``c_bar`` and the
    concentrations present in ``state``.

    Returns
    -------
    (ratio, MSConstants, SpectralConstants)
    """
    n = state.n_species
    cb = state.c_bar
    c = state.concentrations().reshape(n, -1)
    lo = np.minimum(c.min(axis=1), cb) * (1 - 1e-12)
    hi = np.maximum(c.max(axis=1), cb)
    sc = estimate_spectral_constants(state.delta, (lo, hi), lambda_a_samples, seed)
    consts = ms_constants(cb, state.alpha, state.gamma, sc.lambda_a, source="sampled over the initial concentration box")
    e0 = energy_report(state, 0, consts)
    return math.sqrt(e0.E_s) / float(cb.min()), consts, sc


def parabolic_dt(state: PerturbationState, cfl: float) -> float:
    """``cfl dx^2 / D_max`` with ``D_max`` the largest of ``alpha`` and the spectral radius of ``D_MS``."""
    ap = pinv_batch(ms_matrix_batch(state.c_bar, state.delta))
    n = state.n_species
    cb = state.c_bar
    ct = cb.sum()
    D = -np.diag(cb) @ (np.eye(n) - np.outer(np.ones(n), cb) / ct) @ ap @ (np.eye(n) - np.outer(cb, np.ones(n)) / ct)
    dmax = max(state.alpha, float(np.max(np.abs(np.linalg.eigvals(D)))))
    return cfl * state.grid.spacing**2 / dmax


# ----------------------------------------------------------------------------
# Runs
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class MSRunConfig:
    """Parameters of a Maxwell-Stefan run.

    ``profiles[i]`` lists the named shapes of ``c~_i`` (see
    :func:`profile_field`). ``dt = None`` selects :func:`parabolic_dt` with
    ``cfl``. ``smallness`` bounds ``E_0(0)^{1/2} / min c_bar``.
    """

    spec: MixtureSpec
    c_bar: tuple[float, ...]
    profiles: tuple[tuple[dict, ...], ...]
    lam: float = 1.0
    alpha: float = 1.0
    dim: int = 1
    n_x: int = 128
    dt: float | None = None
    cfl: float = 20.0
    t_end: float = 1.0
    picard_tol: float = 1e-11
    picard_max_iter: int = 50
    s_list: tuple[int, ...] = (0, 2)
    snapshot_every: int = 0
    smallness: float = 0.1
    tol_E: float = 1e-8
    lambda_a_samples: int = 1000
    seed: int = 0
    on_breach: str = "abort"
    max_halvings: int = 4

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "spec"}
        d["spec"] = self.spec.to_dict()
        d["profiles"] = [list(p) for p in self.profiles]
        d["c_bar"] = list(self.c_bar)
        d["s_list"] = list(self.s_list)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True, default=float).encode()).hexdigest()


@dataclass
class MSRunResult:
    """Time series, checks and manifest of a run."""

    series: list[dict]
    checks: dict[str, bool]
    manifest: dict
    final: PerturbationState
    files: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def series_csv(self) -> str:
        if not self.series:
            return ""
        header = list(self.series[0].keys())
        return csv_text(header, ([r[h] for h in header] for r in self.series))


def _fields_csv(state: PerturbationState) -> str:
    g = state.grid
    x = g.points().reshape(g.dim, -1)
    cols = [("x%d" % a, x[a]) for a in range(g.dim)]
    cols += [(f"c_tilde_{i}", state.c_tilde[i].ravel()) for i in range(state.n_species)]
    cols.append(("T_tilde", state.T_tilde.ravel()))
    for i in range(state.n_species):
        for a in range(g.dim):
            cols.append((f"U_tilde_{i}_{a}", state.U_tilde[i, a].ravel()))
    header = [c[0] for c in cols]
    return csv_text(header, zip(*[c[1] for c in cols]))


def _series_row(state: PerturbationState, reports: dict[int, EnergyReport], ctot_err: float) -> dict:
    row = {"t": state.t}
    for s, r in reports.items():
        row[f"E_{s}"] = r.E_s
        row[f"D_{s}"] = r.D_s
    r0 = next(iter(reports.values()))
    row.update(
        residual_fick=r0.residual_fick,
        residual_fluxforce=r0.residual_fluxforce,
        residual_ctotT=r0.residual_ctotT,
        ctot_heat_error=ctot_err,
        min_c=r0.min_c,
        min_T=r0.min_T,
        picard_iterations=len(state.picard_differences),
    )
    return row


def run_simulation(cfg: MSRunConfig, out_dir: str | Path | None = None,
                   manifest_name: str = "manifest.json") -> MSRunResult:
    """Run a perturbative Maxwell-Stefan simulation and check its invariants.

    Checks recorded in ``result.checks``: per-step monotonicity of every
    ``E_s`` (relative tolerance ``tol_E``), the integrated decay inequality
    ``E_s(t) + sum D_s dt <= E_s(0)(1 + tol_E)``, positivity margins, the
    Fick closure and the agreement of ``c~_tot`` with the exact heat
    solution. With ``on_breach == "abort"`` a failed check raises
    :class:`InvariantFailure` after writing a diagnostic snapshot.

    Writes ``series.csv``, ``fields_<t>.csv`` and ``manifest.json`` to
    ``out_dir`` when given.
    """
    from . import __version__

    if cfg.on_breach not in ("abort", "record"):
        raise ParameterError("on_breach must be 'abort' or 'record'")
    grid = PeriodicGrid(cfg.dim, cfg.n_x)
    n = cfg.spec.n_species
    if len(cfg.profiles) != n or len(cfg.c_bar) != n:
        raise ParameterError("one profile and one c_bar entry per species are required")
    c0 = np.stack([profile_field(grid, p) for p in cfg.profiles])
    state = make_well_prepared_initial_data(c0, cfg.lam, cfg.c_bar, cfg.alpha, cfg.spec)
    cb = state.c_bar
    ratio, consts, sc = smallness_ratio(state, cfg.lambda_a_samples, cfg.seed)
    if ratio > cfg.smallness * (1 + 1e-12):
        raise InitialDataError(
            f"E_0(0)^(1/2) / min c_bar = {ratio:.3e} exceeds the smallness threshold {cfg.smallness}"
        )
    dt = cfg.dt if cfg.dt is not None else parabolic_dt(state, cfg.cfl)
    n_steps = max(1, int(math.ceil(cfg.t_end / dt - 1e-9)))
    dt = cfg.t_end / n_steps
    out = Path(out_dir) if out_dir is not None else None
    files: list[str] = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def snapshot(st: PerturbationState) -> None:
        if out is not None:
            name = "fields_%s.csv" % format(st.t, ".12g")
            (out / name).write_text(_fields_csv(st))
            if name not in files:
                files.append(name)

    ctot_init = state.ctot_tilde
    reports = {s: energy_report(state, s, consts) for s in cfg.s_list}
    series = [_series_row(state, reports, 0.0)]
    E0 = {s: r.E_s for s, r in reports.items()}
    prevE = dict(E0)
    intD = {s: 0.0 for s in cfg.s_list}
    checks = {f"E_{s}_monotone": True for s in cfg.s_list}
    checks.update({f"E_{s}_decay_inequality": True for s in cfg.s_list})
    checks.update(positivity=True, fick_closure=True, ctot_heat=True)
    snapshot(state)
    step = 0
    while step < n_steps:
        h = dt
        sub = 1
        for attempt in range(cfg.max_halvings + 1):
            try:
                nxt = state
                for _ in range(sub):
                    nxt = picard_advance(nxt, h, cfg.picard_max_iter, cfg.picard_tol)
                break
            except (PositivityError, IterationDivergenceError):
                if attempt == cfg.max_halvings:
                    raise
                h /= 2.0
                sub *= 2
        state = replace(nxt, t=(step + 1) * dt)
        step += 1
        reports = {s: energy_report(state, s, consts) for s in cfg.s_list}
        exact = heat_solution(grid, ctot_init, cfg.alpha, state.t)
        ctot_err = float(np.max(np.abs(state.ctot_tilde - exact)))
        series.append(_series_row(state, reports, ctot_err))
        for s, r in reports.items():
            intD[s] += r.D_s * dt
            if r.E_s > prevE[s] * (1 + cfg.tol_E) + 1e-300:
                checks[f"E_{s}_monotone"] = False
            if r.E_s + intD[s] > E0[s] * (1 + cfg.tol_E) + 1e-300:
                checks[f"E_{s}_decay_inequality"] = False
            prevE[s] = r.E_s
        r0 = reports[cfg.s_list[0]]
        if not (r0.min_c > 0 and r0.min_T > 0):
            checks["positivity"] = False
        if r0.residual_fick > 1e-10:
            checks["fick_closure"] = False
        if ctot_err > 1e-10:
            checks["ctot_heat"] = False
        if cfg.snapshot_every and step % cfg.snapshot_every == 0 and step < n_steps:
            snapshot(state)
        if cfg.on_breach == "abort" and not all(checks.values()):
            snapshot(state)
            failed = sorted(k for k, v in checks.items() if not v)
            raise InvariantFailure(f"invariant breach at t = {state.t!r}: {', '.join(failed)}")
    snapshot(state)
    manifest = {
        "config_hash": cfg.digest(),
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "constants": consts.to_dict() | {"mu_a": sc.mu_a},
        "delta": state.delta.tolist(),
        "grid": {"dim": grid.dim, "n_x": grid.n_x, "dt": dt, "n_steps": n_steps},
        "checks": checks,
        "software_version": __version__,
    }
    result = MSRunResult(series, checks, manifest, state, files)
    if out is not None:
        (out / "series.csv").write_text(result.series_csv())
        files.append("series.csv")
        manifest["files"] = sorted(files + [manifest_name])
        (out / manifest_name).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")
        result.files = manifest["files"]
    return result


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not serializable: {type(o)}")
