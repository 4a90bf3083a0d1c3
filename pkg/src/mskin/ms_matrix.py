"""Maxwell-Stefan matrix algebra.

The Maxwell-Stefan matrix of a concentration vector ``c`` is

    A_ij = c_i c_j / Delta_ij            (i != j)
    A_ii = -sum_{r != i} c_i c_r / Delta_ir

It is symmetric, annihilates the constant vector ``1`` and is negative
semidefinite with kernel exactly ``span(1)`` when ``c > 0``. Flux-force
relations ``A U = rhs`` are solved on ``span(1)^perp`` by a pseudo-inverse
built from a symmetric eigendecomposition (N is small).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, DomainError, SolvabilityError

__all__ = [
    "MSMatrix",
    "SpectralConstants",
    "build_ms_matrix",
    "ms_matrix_batch",
    "project_off_kernel",
    "pinv_batch",
    "solve_flux_force",
    "estimate_spectral_constants",
    "check_spectral_constants",
    "DEFAULT_TAU_SOLV",
]

DEFAULT_TAU_SOLV = 1e-8


def _check_delta(delta, n: int) -> np.ndarray:
    d = np.asarray(delta, dtype=float)
    if d.ndim == 0:
        d = np.full((n, n), float(d))
    if d.shape != (n, n):
        raise DomainError(f"delta must be {n}x{n}")
    off = ~np.eye(n, dtype=bool)
    if np.any(~np.isfinite(d[off])) or np.any(d[off] <= 0):
        raise DomainError("off-diagonal Delta_ij must be positive")
    if not np.allclose(d, d.T, rtol=1e-14, atol=0.0):
        raise DomainError("delta must be symmetric")
    return d


def ms_matrix_batch(c, delta) -> np.ndarray:
    """Maxwell-Stefan matrices for a batch of concentration vectors.

    Parameters
    ----------
    c : array_like, shape (..., N)
    delta : array_like, shape (N, N)

    Returns
    -------
    ndarray, shape (..., N, N)
    """
    c = np.asarray(c, dtype=float)
    n = c.shape[-1]
    d = _check_delta(delta, n)
    inv = np.where(np.eye(n, dtype=bool), 0.0, 1.0 / np.where(np.eye(n, dtype=bool), 1.0, d))
    a = c[..., :, None] * c[..., None, :] * inv
    idx = np.arange(n)
    a[..., idx, idx] = -a.sum(axis=-1)
    return a


@dataclass(frozen=True)
class MSMatrix:
    """A Maxwell-Stefan matrix together with the data it was built from."""

    a: np.ndarray
    c: np.ndarray
    delta: np.ndarray

    @property
    def n(self) -> int:
        return self.a.shape[0]

    def apply(self, x) -> np.ndarray:
        """Apply ``A`` to a species-leading array of shape ``(N, ...)``."""
        return np.tensordot(self.a, np.asarray(x, dtype=float), axes=(1, 0))


def build_ms_matrix(c, delta) -> MSMatrix:
    """Build ``A(c)`` for positive ``c`` and symmetric positive ``Delta``."""
    c = np.asarray(c, dtype=float)
    if c.ndim != 1 or c.size < 1:
        raise DomainError("c must be a nonempty 1-D vector")
    if np.any(~np.isfinite(c)) or np.any(c <= 0):
        raise DomainError(f"concentrations must be positive, got {c}")
    d = _check_delta(delta, c.size)
    return MSMatrix(ms_matrix_batch(c, d), c.copy(), d)


def project_off_kernel(x) -> np.ndarray:
    """Remove the mean over the leading (species) axis: ``x - <x,1>/N 1``."""
    x = np.asarray(x, dtype=float)
    return x - x.mean(axis=0, keepdims=True)


def pinv_batch(a: np.ndarray) -> np.ndarray:
    """Moore-Penrose inverses of symmetric matrices with kernel ``span(1)``.

    The eigenpair whose vector is most aligned with ``1`` is dropped; the
    result is then projected on both sides onto ``span(1)^perp`` so the
    kernel is removed exactly rather than up to eigenvector rounding.
    """
    a = np.asarray(a, dtype=float)
    n = a.shape[-1]
    w, v = np.linalg.eigh(a)
    align = np.abs(v.sum(axis=-2))
    k0 = np.argmax(align, axis=-1)
    keep = np.ones(w.shape, dtype=bool)
    np.put_along_axis(keep, k0[..., None], False, axis=-1)
    inv_w = np.where(keep, 1.0 / np.where(keep, w, 1.0), 0.0)
    ap = (v * inv_w[..., None, :]) @ np.swapaxes(v, -1, -2)
    p = np.eye(n) - 1.0 / n
    return p @ ap @ p


def solve_flux_force(A: MSMatrix, rhs, tau_solv: float = DEFAULT_TAU_SOLV) -> np.ndarray:
    """Solve ``A U = rhs`` with ``<U, 1> = 0``.

    Parameters
    ----------
    A : MSMatrix
    rhs : array_like, shape (N, ...)
        Species-leading right-hand side (for instance ``(N, 3)``).
    tau_solv : float
        Relative tolerance on the solvability condition ``<rhs, 1> = 0``.

    Raises
    ------
    SolvabilityError
        If a component of ``sum_i rhs_i`` exceeds ``tau_solv * |rhs|``.
    """
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape[0] != A.n:
        raise DomainError("rhs must have the species axis first")
    scale = float(np.max(np.abs(rhs))) if rhs.size else 0.0
    defect = float(np.max(np.abs(rhs.sum(axis=0)))) if rhs.size else 0.0
    if defect > tau_solv * max(scale, np.finfo(float).tiny):
        raise SolvabilityError(f"flux-force solvability violated: |sum rhs| = {defect:.3e} (scale {scale:.3e})")
    ap = pinv_batch(A.a)
    return np.tensordot(ap, project_off_kernel(rhs), axes=(1, 0))


@dataclass(frozen=True)
class SpectralConstants:
    """Sampled estimates of the constants lambda_A and mu_A.

    ``lambda_a`` normalizes ``-<X, A X>`` by ``(min c)^2 (|X|^2 - <X,1>^2)``
    and ``mu_a`` normalizes ``|A X|`` by ``<c, 1>^2 |X|``.
    """

    lambda_a: float
    mu_a: float
    sample_count: int
    c_box: tuple[tuple[float, ...], tuple[float, ...]]
    seed: int

    def to_dict(self) -> dict:
        return {
            "lambda_a": self.lambda_a,
            "mu_a": self.mu_a,
            "sample_count": self.sample_count,
            "c_box": [list(self.c_box[0]), list(self.c_box[1])],
            "seed": self.seed,
        }


def _box(c_box, n: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = (np.atleast_1d(np.asarray(b, dtype=float)) for b in c_box)
    if n is not None:
        lo = np.broadcast_to(lo, (n,)).copy()
        hi = np.broadcast_to(hi, (n,)).copy()
    if lo.shape != hi.shape or lo.size == 0:
        raise DegenerateInputError("c_box bounds must be nonempty vectors of equal length")
    if np.any(lo <= 0) or np.any(hi < lo) or not np.all(np.isfinite(hi)):
        raise DegenerateInputError("c_box must be a nonempty subset of (0, inf)^N")
    return lo, hi


def estimate_spectral_constants(delta, c_box, n_samples: int = 1000, seed: int = 0) -> SpectralConstants:
    """Estimate lambda_A and mu_A over a box of concentrations.

    For each sampled ``c`` the exact extremal ratios over ``X`` are used:
    the smallest nonzero eigenvalue of ``-A(c)`` (every eigenvector other
    than ``1`` is orthogonal to ``1``) and the spectral norm of ``A(c)``.
    The minimum and maximum over the sample then hold for every ``X`` at
    every sampled ``c``.

    The lower inequality is normalized by ``|X|^2 - <X,1>^2``, which equals
    ``|X|^2`` on ``span(1)^perp`` and never exceeds it elsewhere.
    """
    d = np.asarray(delta, dtype=float)
    lo, hi = _box(c_box, d.shape[0] if d.ndim else None)
    n = lo.size
    d = _check_delta(d, n)
    if n_samples < 1:
        raise DegenerateInputError("n_samples must be positive")
    rng = np.random.default_rng(seed)
    c = lo + (hi - lo) * rng.random((n_samples, n))
    c[0] = lo  # box corners are natural extremes
    if n_samples > 1:
        c[1] = hi
    a = ms_matrix_batch(c, d)
    w = np.linalg.eigvalsh(a)
    # Largest eigenvalue is the kernel one (zero); the next is -lambda_min.
    lam = -w[:, -2] / np.min(c, axis=1) ** 2 if n > 1 else np.full(n_samples, np.inf)
    mu = np.max(np.abs(w), axis=1) / np.sum(c, axis=1) ** 2
    return SpectralConstants(
        lambda_a=float(np.min(lam)),
        mu_a=float(np.max(mu)),
        sample_count=n_samples,
        c_box=(tuple(lo.tolist()), tuple(hi.tolist())),
        seed=seed,
    )


def check_spectral_constants(consts: SpectralConstants, delta, c, x, rtol: float = 1e-12) -> tuple[bool, bool]:
    """Check both spectral inequalities on samples ``c`` (M, N) and ``x`` (M, N).

    Returns ``(upper_ok, lower_ok)`` for ``|A X| <= mu_A <c,1>^2 |X|`` and
    ``<X, A X> <= -lambda_A (min c)^2 (|X|^2 - <X,1>^2)``.
    """
    c = np.atleast_2d(np.asarray(c, dtype=float))
    x = np.atleast_2d(np.asarray(x, dtype=float))
    a = ms_matrix_batch(c, delta)
    ax = np.einsum("mij,mj->mi", a, x)
    nx = np.linalg.norm(x, axis=1)
    csum = c.sum(axis=1)
    scale = np.abs(a).max(axis=(1, 2)) * nx**2
    upper = np.linalg.norm(ax, axis=1) <= consts.mu_a * csum**2 * nx * (1 + rtol) + 1e-300
    quad = np.einsum("mi,mi->m", x, ax)
    bound = -consts.lambda_a * np.min(c, axis=1) ** 2 * (nx**2 - x.sum(axis=1) ** 2)
    lower = quad <= bound + rtol * scale
    return bool(np.all(upper)), bool(np.all(lower))
