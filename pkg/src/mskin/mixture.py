"""Physical description of a gas mixture and Maxwellian utilities.

This module holds the static data shared by every other module: species
masses, the collision-kernel parameters, uniform velocity grids, and the
closed-form Maxwellian distributions together with their moments.

Conventions
-----------
* Boltzmann's constant is 1 and all quantities are dimensionless.
* A Maxwellian with parameters ``(c, m, u, T, eps)`` is

      M(v) = c (m / 2 pi T)^{3/2} exp(-m |v - eps u|^2 / (2 T)).

* Velocity grids are cell-centred: ``n_v`` midpoints per axis on
  ``[-v_max, v_max]``, so grid sums are midpoint-rule quadratures.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

from .errors import DegenerateInputError, DomainError, InvariantFailure, ParameterError

__all__ = [
    "AngularLaw",
    "MixtureSpec",
    "MaxwellianParams",
    "VelocityGrid",
    "DistributionVector",
    "MacroMoments",
    "BoundsReport",
    "eval_maxwellian",
    "maxwellian_on_grid",
    "maxwellian_moments",
    "third_moment",
    "macro_moments",
    "global_equilibrium",
    "normalized_equilibrium",
    "maxwellian_bounds_check",
    "tail_covering_samples",
    "write_distribution",
    "read_distribution",
    "distribution_to_csv",
]


# ---------------------------------------------------------------------------
# Angular laws and the mixture description
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AngularLaw:
    """Angular part b(cos theta) of a collision kernel.

    Either a constant ``b0`` or a tabulated positive function on [-1, 1]
    interpolated by a shape-preserving C^1 cubic (PCHIP).
    """

    b0: float | None = None
    nodes: tuple[float, ...] | None = None
    values: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.b0 is not None:
            if self.nodes is not None or self.values is not None:
                raise DomainError("angular law is either constant or tabulated, not both")
            if not (math.isfinite(self.b0) and self.b0 > 0):
                raise DomainError(f"constant angular law needs b0 > 0, got {self.b0}")
            return
        if self.nodes is None or self.values is None:
            raise DomainError("tabulated angular law needs nodes and values")
        x = np.asarray(self.nodes, dtype=float)
        y = np.asarray(self.values, dtype=float)
        if x.ndim != 1 or x.shape != y.shape or x.size < 2:
            raise DomainError("angular nodes and values must be 1-D arrays of equal length >= 2")
        if np.any(np.diff(x) <= 0) or x[0] != -1.0 or x[-1] != 1.0:
            raise DomainError("angular nodes must increase strictly from -1 to 1")
        if not np.all(np.isfinite(y)) or np.any(y <= 0):
            raise DomainError("tabulated angular law must be positive and finite")

    @classmethod
    def constant(cls, b0: float) -> AngularLaw:
        return cls(b0=float(b0))

    @classmethod
    def tabulated(cls, nodes: Sequence[float], values: Sequence[float]) -> AngularLaw:
        return cls(nodes=tuple(float(a) for a in nodes), values=tuple(float(a) for a in values))

    @property
    def is_constant(self) -> bool:
        return self.b0 is not None

    def _interp(self) -> PchipInterpolator:
        return PchipInterpolator(np.asarray(self.nodes), np.asarray(self.values))

    def __call__(self, x):
        """Evaluate b at cosines ``x`` (clipped to [-1, 1] against rounding)."""
        x = np.clip(np.asarray(x, dtype=float), -1.0, 1.0)
        if self.b0 is not None:
            return np.full_like(x, self.b0)
        return self._interp()(x)

    def l1_norm(self) -> float:
        """The L^1(-1, 1) norm of b."""
        if self.b0 is not None:
            return 2.0 * self.b0
        return float(self._interp().integrate(-1.0, 1.0))

    def first_moment(self) -> float:
        """The integral of x b(x) over [-1, 1] (zero for even laws)."""
        if self.b0 is not None:
            return 0.0
        from scipy.integrate import quad

        return float(quad(lambda t: t * float(self(t)), -1.0, 1.0, limit=200)[0])

    def upper_bound(self) -> float:
        if self.b0 is not None:
            return self.b0
        return float(np.max(self(np.linspace(-1.0, 1.0, 2001))))

    def to_dict(self) -> dict:
        if self.b0 is not None:
            return {"kind": "constant", "b0": self.b0}
        return {"kind": "tabulated", "nodes": list(self.nodes), "values": list(self.values)}


@dataclass(frozen=True)
class MixtureSpec:
    """Static physical description of an N-species mixture.

    Parameters
    ----------
    masses : sequence of float
        Positive atomic masses m_i.
    gamma : float
        Exponent of the kinetic part |v - v_*|^gamma. Construction accepts
        gamma in (-3, 1]; the kinetic probes require gamma in [0, 1].
    phi_const : (N, N) array_like or float
        Symmetric positive constants C^Phi_ij multiplying the kinetic part.
    angular : AngularLaw or (N, N) nested sequence of AngularLaw
        Angular laws b_ij, symmetric in (i, j).
    """

    masses: tuple[float, ...]
    gamma: float = 0.0
    phi_const: np.ndarray = field(default=None)  # type: ignore[assignment]
    angular: tuple[tuple[AngularLaw, ...], ...] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        masses = tuple(float(m) for m in self.masses)
        if len(masses) < 1:
            raise DomainError("a mixture needs at least one species")
        if not all(math.isfinite(m) and m > 0 for m in masses):
            raise DomainError(f"masses must be positive and finite, got {masses}")
        object.__setattr__(self, "masses", masses)
        n = len(masses)
        g = float(self.gamma)
        if not (-3.0 < g <= 1.0):
            raise DomainError(f"gamma must lie in (-3, 1], got {g}")
        object.__setattr__(self, "gamma", g)

        phi = 1.0 if self.phi_const is None else self.phi_const
        phi = np.asarray(phi, dtype=float)
        if phi.ndim == 0:
            phi = np.full((n, n), float(phi))
        if phi.shape != (n, n):
            raise DomainError(f"phi_const must be {n}x{n}")
        if not np.all(np.isfinite(phi)) or np.any(phi <= 0):
            raise DomainError("phi_const entries must be positive")
        if not np.array_equal(phi, phi.T):
            raise DomainError("phi_const must be symmetric")
        phi = phi.copy()
        phi.setflags(write=False)
        object.__setattr__(self, "phi_const", phi)

        ang = AngularLaw.constant(1.0) if self.angular is None else self.angular
        if isinstance(ang, AngularLaw):
            ang = tuple(tuple(ang for _ in range(n)) for _ in range(n))
        else:
            ang = tuple(tuple(row) for row in ang)
        if len(ang) != n or any(len(row) != n for row in ang):
            raise DomainError(f"angular must be an {n}x{n} table of laws")
        for i in range(n):
            for j in range(n):
                if not isinstance(ang[i][j], AngularLaw):
                    raise DomainError("angular entries must be AngularLaw instances")
                if ang[i][j] != ang[j][i]:
                    raise DomainError("angular laws must be symmetric in (i, j)")
        object.__setattr__(self, "angular", ang)

    @property
    def n_species(self) -> int:
        return len(self.masses)

    @property
    def mass_array(self) -> np.ndarray:
        return np.asarray(self.masses)

    def reduced_mass(self, i: int, j: int) -> float:
        mi, mj = self.masses[i], self.masses[j]
        return mi * mj / (mi + mj)

    def require_kinetic(self) -> None:
        """Raise unless gamma is in the hard/Maxwellian range [0, 1]."""
        if not (0.0 <= self.gamma <= 1.0):
            raise DomainError(f"kinetic operations need gamma in [0, 1], got {self.gamma}")

    def kernel(self, i: int, j: int, rel_speed, cos_theta):
        """Collision kernel B_ij = C^Phi_ij |v - v_*|^gamma b_ij(cos theta)."""
        r = np.asarray(rel_speed, dtype=float)
        return self.phi_const[i, j] * r**self.gamma * self.angular[i][j](cos_theta)

    def to_dict(self) -> dict:
        return {
            "masses": list(self.masses),
            "gamma": self.gamma,
            "phi_const": self.phi_const.tolist(),
            "angular": [[law.to_dict() for law in row] for row in self.angular],
        }


# ---------------------------------------------------------------------------
# Maxwellians
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MaxwellianParams:
    """Parameters ``(c, m, u, T, eps)`` of one species' Maxwellian."""

    concentration: float
    mass: float
    bulk_velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    temperature: float = 1.0
    epsilon: float = 1.0

    def __post_init__(self) -> None:
        u = tuple(float(a) for a in self.bulk_velocity)
        if len(u) != 3 or not all(math.isfinite(a) for a in u):
            raise DomainError("bulk velocity must be a finite 3-vector")
        object.__setattr__(self, "bulk_velocity", u)
        if not (self.concentration > 0 and math.isfinite(self.concentration)):
            raise DomainError(f"concentration must be positive, got {self.concentration}")
        if not (self.mass > 0 and math.isfinite(self.mass)):
            raise DomainError(f"mass must be positive, got {self.mass}")
        if not (self.temperature > 0 and math.isfinite(self.temperature)):
            raise DomainError(f"temperature must be positive, got {self.temperature}")
        if not (0.0 < self.epsilon <= 1.0):
            raise DomainError(f"epsilon must lie in (0, 1], got {self.epsilon}")

    @property
    def shift(self) -> np.ndarray:
        """The actual mean velocity eps * u."""
        return self.epsilon * np.asarray(self.bulk_velocity)

    @property
    def thermal_width(self) -> float:
        return math.sqrt(self.temperature / self.mass)


def eval_maxwellian(p: MaxwellianParams, v) -> np.ndarray | float:
    """Evaluate the Maxwellian at one velocity or an ``(..., 3)`` array of them."""
    v = np.asarray(v, dtype=float)
    if v.shape[-1:] != (3,):
        raise DomainError("velocities must have a trailing axis of length 3")
    if not np.all(np.isfinite(v)):
        raise DomainError("velocities must be finite")
    d2 = np.sum((v - p.shift) ** 2, axis=-1)
    norm = p.concentration * (p.mass / (2.0 * math.pi * p.temperature)) ** 1.5
    out = norm * np.exp(-p.mass * d2 / (2.0 * p.temperature))
    return float(out) if out.ndim == 0 else out


def maxwellian_moments(p: MaxwellianParams) -> tuple[float, np.ndarray, float]:
    """Analytic (mass, momentum, energy) moments: int M (1, v, |v|^2) dv."""
    c, eu = p.concentration, p.shift
    return c, c * eu, 3.0 * c * p.temperature / p.mass + c * float(eu @ eu)


def third_moment(p: MaxwellianParams) -> np.ndarray:
    """Analytic vector moment int |v|^2 v M dv = c|eps u|^2 eps u + 5 c T eps u / m."""
    c, eu = p.concentration, p.shift
    return c * float(eu @ eu) * eu + 5.0 * c * p.temperature / p.mass * eu


# ---------------------------------------------------------------------------
# Velocity grids and distributions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VelocityGrid:
    """Uniform cell-centred Cartesian grid on ``[-v_max, v_max]^3``."""

    n_v: int
    v_max: float

    def __post_init__(self) -> None:
        if int(self.n_v) != self.n_v or self.n_v < 2:
            raise ParameterError(f"n_v must be an integer >= 2, got {self.n_v}")
        if not (self.v_max > 0 and math.isfinite(self.v_max)):
            raise ParameterError(f"v_max must be positive, got {self.v_max}")
        object.__setattr__(self, "n_v", int(self.n_v))
        object.__setattr__(self, "v_max", float(self.v_max))

    @classmethod
    def for_maxwellian(cls, n_v: int, temperature: float = 1.0, mass: float = 1.0,
                       speed: float = 0.0, widths: float = 8.0) -> VelocityGrid:
        """Grid whose half-width is ``widths`` thermal widths plus the bulk speed."""
        return cls(n_v, widths * math.sqrt(temperature / mass) + speed)

    @property
    def spacing(self) -> float:
        return 2.0 * self.v_max / self.n_v

    @property
    def cell_volume(self) -> float:
        return self.spacing**3

    @property
    def axis(self) -> np.ndarray:
        return -self.v_max + (np.arange(self.n_v) + 0.5) * self.spacing

    @property
    def size(self) -> int:
        return self.n_v**3

    def points(self) -> np.ndarray:
        """All grid velocities as a ``(n_v^3, 3)`` array in C order."""
        x = self.axis
        return np.stack(np.meshgrid(x, x, x, indexing="ij"), axis=-1).reshape(-1, 3)

    def integrate(self, values) -> np.ndarray:
        """Midpoint-rule integral over the last axis."""
        return np.sum(values, axis=-1) * self.cell_volume


@dataclass(frozen=True)
class DistributionVector:
    """Per-species samples ``F_i(v)`` on a shared velocity grid.

    ``values`` has shape ``(N, n_v**3)``; velocity points follow
    :meth:`VelocityGrid.points`.
    """

    grid: VelocityGrid
    values: np.ndarray

    def __post_init__(self) -> None:
        vals = np.array(self.values, dtype=float)
        if vals.ndim != 2 or vals.shape[1] != self.grid.size:
            raise DomainError(f"values must have shape (N, {self.grid.size})")
        if not np.all(np.isfinite(vals)):
            raise DomainError("distribution values must be finite")
        if np.any(vals < 0):
            raise DomainError("distribution values must be nonnegative")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def n_species(self) -> int:
        return self.values.shape[0]


def maxwellian_on_grid(params: Sequence[MaxwellianParams], grid: VelocityGrid) -> DistributionVector:
    """Sample one Maxwellian per species on ``grid``."""
    pts = grid.points()
    return DistributionVector(grid, np.stack([eval_maxwellian(p, pts) for p in params]))


@dataclass(frozen=True)
class MacroMoments:
    """Macroscopic moments of a distribution vector.

    ``temperature`` is the mixture temperature
    ``sum_i m_i int |v - u|^2 F_i / (3 sum_i c_i)``.
    """

    c: np.ndarray
    momentum: np.ndarray
    energy: float
    bulk_velocity: np.ndarray
    temperature: float
    rho: float


def macro_moments(spec: MixtureSpec, F: DistributionVector) -> MacroMoments:
    """Grid moments of ``F`` (midpoint quadrature)."""
    if F.n_species != spec.n_species:
        raise DomainError("distribution and mixture disagree on species count")
    v = F.grid.points()
    dv = F.grid.cell_volume
    m = spec.mass_array
    c = F.values.sum(axis=1) * dv
    if not np.all(c > 0):
        raise DegenerateInputError("every species needs positive total mass")
    rho = float(m @ c)
    mom = (m[:, None] * (F.values @ v)).sum(axis=0) * dv
    v2 = np.sum(v * v, axis=1)
    energy = 0.5 * float(m @ (F.values @ v2)) * dv
    u = mom / rho
    # Thermal energy about the bulk velocity: sum m_i int |v - u|^2 F_i.
    thermal = 2.0 * energy - rho * float(u @ u)
    T = thermal / (3.0 * float(c.sum()))
    return MacroMoments(c=c, momentum=mom, energy=energy, bulk_velocity=u, temperature=T, rho=rho)


def global_equilibrium(spec: MixtureSpec, F_in: DistributionVector) -> tuple[MacroMoments, DistributionVector]:
    """Moments of ``F_in`` and the Maxwellian vector sharing them.

    The returned Maxwellians have concentrations ``c_i``, common bulk
    velocity ``u`` and common temperature ``T`` of ``F_in``. With ``u = 0``
    and ``T = 1`` this is the normalized equilibrium ``mu``.
    """
    tot = F_in.values.sum()
    if not tot > 0:
        raise DegenerateInputError("initial distribution has zero total mass")
    mom = macro_moments(spec, F_in)
    params = [
        MaxwellianParams(float(mom.c[i]), spec.masses[i], tuple(mom.bulk_velocity), mom.temperature, 1.0)
        for i in range(spec.n_species)
    ]
    return mom, maxwellian_on_grid(params, F_in.grid)


def normalized_equilibrium(spec: MixtureSpec, c_bar: Sequence[float], grid: VelocityGrid) -> DistributionVector:
    """The global equilibrium ``mu_i = c_i (m_i / 2 pi)^{3/2} exp(-m_i |v|^2 / 2)``."""
    params = [MaxwellianParams(float(c), m) for c, m in zip(c_bar, spec.masses, strict=True)]
    return maxwellian_on_grid(params, grid)


# ---------------------------------------------------------------------------
# Pointwise sandwich bounds for perturbed Maxwellians
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundsReport:
    """Constants and worst log-margins of the Maxwellian sandwich bounds.

    Margins are ``min log(M / lower)`` and ``min log(upper / M)`` over the
    samples; both are nonnegative when the bounds hold.
    """

    delta: float
    c_low: float | None
    r_low: float | None
    c_up: float | None
    r_up: float | None
    lower_margin: float | None
    upper_margin: float | None
    n_samples: int


def _log_unit_maxwellian(mass: float, v: np.ndarray) -> np.ndarray:
    """log of the unit Maxwellian (m / 2 pi)^{3/2} exp(-m |v|^2 / 2)."""
    return 1.5 * math.log(mass / (2.0 * math.pi)) - 0.5 * mass * np.sum(v * v, axis=-1)


def maxwellian_bounds_check(
    p: MaxwellianParams,
    delta: float,
    samples,
    delta_ms: float,
    which: str = "both",
    masses: Sequence[float] | None = None,
    tol: float = 1e-12,
) -> BoundsReport:
    """Check ``C_low R_low c M1^{1/delta} <= M <= C_up R_up c M1^delta`` pointwise.

    ``M1`` is the unit Maxwellian of the species (c = 1, u = 0, T = 1). The
    temperature excursion ``tau = |T - 1|`` must not exceed ``delta_ms``.
    With ``s = |eps u|`` the factors are

        R_low = (1 + tau)^{-3/2} exp(-m s^2 / (2 (1 - tau - delta)))
        R_up  = (1 - tau)^{-3/2} exp(delta m s^2 / (2 (1 - (1 + tau) delta)))

    and ``C_low = min_k (m_k/2pi)^{3(delta-1)/(2 delta)}``,
    ``C_up = max_k (m_k/2pi)^{3(1-delta)/2}`` over the mixture masses
    (``masses``, defaulting to the species mass alone).

    Raises
    ------
    ParameterError
        If ``delta`` is outside ``(0, 1 - delta_ms)`` (lower bound) or
        ``(0, 1 / (1 + delta_ms))`` (upper bound), or the state is not
        within ``delta_ms`` of unit temperature.
    InvariantFailure
        If a sample violates a bound by more than ``tol`` in log scale.
    """
    if which not in ("both", "lower", "upper"):
        raise ParameterError(f"which must be 'both', 'lower' or 'upper', got {which!r}")
    if not (0.0 <= delta_ms < 1.0):
        raise ParameterError(f"delta_ms must lie in [0, 1), got {delta_ms}")
    tau = abs(p.temperature - 1.0)
    if tau > delta_ms:
        raise ParameterError(f"temperature excursion {tau} exceeds delta_ms = {delta_ms}")
    do_low = which in ("both", "lower")
    do_up = which in ("both", "upper")
    if do_low and not (0.0 < delta < 1.0 - delta_ms):
        raise ParameterError(f"lower bound needs delta in (0, {1.0 - delta_ms}), got {delta}")
    if do_up and not (0.0 < delta < 1.0 / (1.0 + delta_ms)):
        raise ParameterError(f"upper bound needs delta in (0, {1.0 / (1.0 + delta_ms)}), got {delta}")

    v = np.asarray(samples, dtype=float).reshape(-1, 3)
    ms = np.asarray(masses if masses is not None else [p.mass], dtype=float)
    m, c = p.mass, p.concentration
    s2 = float(p.shift @ p.shift)
    d2 = np.sum((v - p.shift) ** 2, axis=-1)
    log_m = math.log(c) + 1.5 * math.log(m / (2.0 * math.pi * p.temperature)) - m * d2 / (2.0 * p.temperature)
    log_unit = _log_unit_maxwellian(m, v)

    c_low = r_low = c_up = r_up = low_margin = up_margin = None
    if do_low:
        c_low = float(np.min((ms / (2.0 * math.pi)) ** (1.5 * (delta - 1.0) / delta)))
        r_low = (1.0 + tau) ** -1.5 * math.exp(-m * s2 / (2.0 * (1.0 - tau - delta)))
        log_low = math.log(c_low * r_low * c) + log_unit / delta
        low_margin = float(np.min(log_m - log_low))
    if do_up:
        c_up = float(np.max((ms / (2.0 * math.pi)) ** (1.5 * (1.0 - delta))))
        r_up = (1.0 - tau) ** -1.5 * math.exp(delta * m * s2 / (2.0 * (1.0 - (1.0 + tau) * delta)))
        log_up = math.log(c_up * r_up * c) + delta * log_unit
        up_margin = float(np.min(log_up - log_m))
    for name, marg in (("lower", low_margin), ("upper", up_margin)):
        if marg is not None and marg < -tol:
            raise InvariantFailure(f"{name} Maxwellian bound violated: log-margin {marg:.3e}")
    return BoundsReport(delta, c_low, r_low, c_up, r_up, low_margin, up_margin, len(v))


def tail_covering_samples(n: int, p: MaxwellianParams, seed: int = 0, spread: float = 3.0) -> np.ndarray:
    """Velocity samples covering the bulk and the far tails of a Maxwellian.

    Half the samples are Gaussian about the mean with the thermal width,
    the rest use ``spread`` times that width so tails out to many widths
    are visited.
    """
    rng = np.random.default_rng(seed)
    w = p.thermal_width
    k = n // 2
    near = p.shift + w * rng.standard_normal((k, 3))
    far = p.shift + spread * w * rng.standard_normal((n - k, 3))
    return np.concatenate([near, far])


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_MAGIC = b"MSKDV1\x00\x00"


def write_distribution(path: str | Path, spec: MixtureSpec, F: DistributionVector) -> None:
    """Write ``F`` to a flat little-endian binary container.

    Layout: 8-byte magic, int64 N, int64 n_v, float64 v_max, N float64
    masses, then the ``(N, n_v^3)`` float64 values in row-major order.
    """
    if F.n_species != spec.n_species:
        raise DomainError("distribution and mixture disagree on species count")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<qqd", F.n_species, F.grid.n_v, F.grid.v_max))
        fh.write(np.asarray(spec.masses, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(F.values, dtype="<f8").tobytes())


def read_distribution(path: str | Path) -> tuple[tuple[float, ...], DistributionVector]:
    """Read a container written by :func:`write_distribution`; returns (masses, F)."""
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise DomainError(f"{path}: not a distribution container")
    n, n_v, v_max = struct.unpack_from("<qqd", data, 8)
    off = 8 + 24
    masses = tuple(np.frombuffer(data, dtype="<f8", count=n, offset=off).tolist())
    off += 8 * n
    grid = VelocityGrid(n_v, v_max)
    vals = np.frombuffer(data, dtype="<f8", count=n * grid.size, offset=off).reshape(n, grid.size)
    return masses, DistributionVector(grid, vals.copy())


def distribution_to_csv(F: DistributionVector) -> str:
    """CSV text with columns species, vx, vy, vz, F (for small grids)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["species", "vx", "vy", "vz", "F"])
    pts = F.grid.points()
    for i in range(F.n_species):
        for k in range(F.grid.size):
            w.writerow([i, *(repr(float(a)) for a in pts[k]), repr(float(F.values[i, k]))])
    return buf.getvalue()
