"""Binary diffusion coefficients of the Maxwell-Stefan limit.

For the kernel ``B_ij = C^Phi_ij |v - v_*|^gamma b_ij(cos theta)`` the
friction coefficient between species ``i`` and ``j`` at temperature ``T`` is

    k_ij(T) = C^Phi_ij (8 sqrt(pi) mu_ij |b_ij|_1 / 3) Gamma((gamma + 5) / 2)
              (2 T / mu_ij)^{gamma / 2}
            = T^{gamma / 2} / Delta_ij,

with reduced mass ``mu_ij = m_i m_j / (m_i + m_j)`` and ``|b|_1`` the
L^1(-1, 1) norm of the angular law. It is the closed form of the
nine-dimensional integral

    k_ij = C^Phi_ij mu_ij^2 / (6 T) int |v - v_*|^gamma b_ij(cos theta)
           |(v_* - v) + |v - v_*| sigma|^2 G_i(v) G_j(v_*) dsigma dv_* dv,

where ``G_k`` is the normalized Gaussian of variance ``T / m_k`` and
``cos theta = sigma . (v - v_*) / |v - v_*|``. The angular integral over
the sphere contributes ``2 pi int_{-1}^{1} b(x)(1 - x) dx``, which equals
``2 pi |b|_1`` for laws with vanishing first moment (constant laws
included). :func:`k_mc_oracle` estimates the integral directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._util import csv_text, mean_and_stderr, rng_stream, uniform_sphere
from .errors import DomainError, ParameterError
from .mixture import MixtureSpec

__all__ = [
    "DiffusionModel",
    "k_closed_form",
    "k_mc_oracle",
    "build_delta",
    "k_from_delta",
    "coefficients_table",
]


def k_closed_form(spec: MixtureSpec, i: int, j: int, T: float) -> float:
    """Closed-form friction coefficient ``k_ij(T)``."""
    if not (T > 0 and math.isfinite(T)):
        raise DomainError(f"temperature must be positive, got {T}")
    mu = spec.reduced_mass(i, j)
    g = spec.gamma
    b1 = spec.angular[i][j].l1_norm()
    pref = 8.0 * math.sqrt(math.pi) * mu * b1 / 3.0
    return float(spec.phi_const[i, j]) * pref * math.gamma((g + 5.0) / 2.0) * (2.0 * T / mu) ** (g / 2.0)


def k_mc_oracle(
    spec: MixtureSpec,
    i: int,
    j: int,
    T: float,
    n_samples: int = 1_000_000,
    seed: int = 0,
    batch_size: int = 1 << 16,
) -> tuple[float, float]:
    """Monte-Carlo estimate of the integral defining ``k_ij(T)``.

    Velocities are drawn from ``N(0, T/m_i)`` and ``N(0, T/m_j)`` and
    ``sigma`` uniformly on the sphere, so the Gaussian weights cancel and
    the estimator averages ``4 pi C mu^2/(6T) |w|^gamma b(cos) |-w + |w| sigma|^2``.

    Returns
    -------
    (estimate, std_err)
    """
    spec.require_kinetic()
    if n_samples < 10_000:
        raise ParameterError("the oracle needs at least 1e4 samples")
    if not (T > 0 and math.isfinite(T)):
        raise DomainError(f"temperature must be positive, got {T}")
    mi, mj = spec.masses[i], spec.masses[j]
    mu = mi * mj / (mi + mj)
    law = spec.angular[i][j]
    pref = float(spec.phi_const[i, j]) * mu**2 / (6.0 * T) * 4.0 * math.pi
    sums, sqs = [], []
    done, b = 0, 0
    while done < n_samples:
        m = min(batch_size, n_samples - done)
        rng = rng_stream(seed, i, j, b)
        v = rng.standard_normal((m, 3)) * math.sqrt(T / mi)
        vs = rng.standard_normal((m, 3)) * math.sqrt(T / mj)
        sig = uniform_sphere(rng, m)
        w = v - vs
        r = np.linalg.norm(w, axis=1)
        cos = np.einsum("ij,ij->i", sig, w) / np.where(r > 0, r, 1.0)
        post = -w + r[:, None] * sig
        f = pref * r**spec.gamma * law(cos) * np.einsum("ij,ij->i", post, post)
        sums.append(float(np.sum(f)))
        sqs.append(float(np.sum(f * f)))
        done += m
        b += 1
    return mean_and_stderr(sums, sqs, n_samples)


@dataclass(frozen=True)
class DiffusionModel:
    """Reduced masses, angular norms and the temperature-free ``Delta_ij``."""

    mu_red: np.ndarray
    b_l1: np.ndarray
    gamma: float
    delta: np.ndarray

    def k(self, T: float) -> np.ndarray:
        return k_from_delta(self, T)


def build_delta(spec: MixtureSpec, reference: float = 1.0) -> DiffusionModel:
    """``Delta_ij = T^{gamma/2} / k_ij(T)`` evaluated at ``T = reference``.

    ``k_ij(T) T^{-gamma/2}`` does not depend on ``T``, so ``Delta`` depends
    only on masses and kernel parameters.
    """
    n = spec.n_species
    mu = np.empty((n, n))
    b1 = np.empty((n, n))
    delta = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            mu[i, j] = spec.reduced_mass(i, j)
            b1[i, j] = spec.angular[i][j].l1_norm()
            delta[i, j] = reference ** (spec.gamma / 2.0) / k_closed_form(spec, i, j, reference)
    # Symmetric by construction of the inputs; enforce bitwise symmetry.
    delta = np.triu(delta) + np.triu(delta, 1).T
    for a in (mu, b1, delta):
        a.setflags(write=False)
    return DiffusionModel(mu, b1, spec.gamma, delta)


def k_from_delta(model: DiffusionModel, T: float) -> np.ndarray:
    """``k_ij(T) = T^{gamma/2} / Delta_ij``."""
    if not T > 0:
        raise DomainError(f"temperature must be positive, got {T}")
    return T ** (model.gamma / 2.0) / model.delta


def coefficients_table(
    spec: MixtureSpec,
    n_samples: int | None = None,
    seed: int = 0,
) -> tuple[list[tuple], str]:
    """Rows ``(i, j, mu_ij, Delta_ij, k_ij(1), mc_estimate, std_err)`` and CSV text.

    Only pairs with ``i <= j`` are listed. The Monte-Carlo columns are empty
    when ``n_samples`` is None.
    """
    model = build_delta(spec)
    rows = []
    for i in range(spec.n_species):
        for j in range(i, spec.n_species):
            k1 = k_closed_form(spec, i, j, 1.0)
            est, err = ("", "")
            if n_samples is not None:
                est, err = k_mc_oracle(spec, i, j, 1.0, n_samples, seed)
            rows.append((i, j, float(model.mu_red[i, j]), float(model.delta[i, j]), k1, est, err))
    text = csv_text(["i", "j", "mu_ij", "delta_ij", "k_ij_T1", "mc_estimate", "std_err"], rows)
    return rows, text
