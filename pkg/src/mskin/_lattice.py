"""Conservative discrete-velocity collision rule on a cell-centred grid.

Velocities are ``v_p = -v_max + (p + 1/2) h`` for integer triples ``p``.
For a pair ``(p, q)`` with lattice relative velocity ``g = p - q`` the
post-collision relative velocities are the lattice points ``g'`` with
``|g'| = |g|`` such that both post-collision velocities land on the grid:

    p' = p + (g' - g) m_j / M,     q' = q - (g' - g) m_i / M,   M = m_i + m_j,

with masses given as integers. Each admissible ``g'`` stands for an equal
share ``4 pi / n_adm(g)`` of the scattering sphere, ``n_adm(g)`` being the
number of admissible lattice points on the sphere through ``g`` (``g``
itself included). The weight of a collision is

    W = C^Phi_ij |g h|^gamma b_ij(g . g' / |g|^2) (4 pi / n_adm) h^3.

The rule is microreversible (``W(g -> g') = W(g' -> g)``), so mass of each
species, total momentum and total energy are conserved to rounding and the
discrete H-theorem holds. Collisions are restricted to the ball
``|v| <= v_max`` inscribed in the grid box: at the box corners almost every
scattering direction leaves the box, which would make the truncated loss
frequency vanish there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numba as nb
import numpy as np

from .errors import DomainError
from .mixture import MixtureSpec, VelocityGrid


def integer_masses(masses, max_den: int = 64, rtol: float = 1e-12) -> tuple[int, ...]:
    """Smallest integers proportional to ``masses``.

    Raises
    ------
    DomainError
        If the mass ratios are not rationals with small denominators.
    """
    m0 = min(masses)
    fr = [Fraction(m / m0).limit_denominator(max_den) for m in masses]
    for f, m in zip(fr, masses):
        if abs(float(f) * m0 - m) > rtol * m:
            raise DomainError(f"lattice collision rule needs commensurate masses, got {tuple(masses)}")
    lcm = 1
    for f in fr:
        lcm = lcm * f.denominator // math.gcd(lcm, f.denominator)
    ints = [f.numerator * (lcm // f.denominator) for f in fr]
    g = 0
    for a in ints:
        g = math.gcd(g, a)
    return tuple(a // g for a in ints)


def _pair_offsets(n: int, mi: int, mj: int, max_g2: int):
    """Admissible post-collision shifts for every lattice relative velocity.

    Returns CSR data ``(ptr, A, B, cos, nadm)`` indexed by the flat index of
    ``g`` in the ``(2n-1)^3`` cube of differences: ``A`` shifts ``p``,
    ``B`` is subtracted from ``q``.
    """
    span = 2 * n - 1
    r = np.arange(-(n - 1), n)
    G = np.stack(np.meshgrid(r, r, r, indexing="ij"), -1).reshape(-1, 3)
    nrm = np.einsum("ij,ij->i", G, G)
    M = mi + mj
    keys = np.flatnonzero((nrm > 0) & (nrm <= max_g2))
    order = keys[np.argsort(nrm[keys], kind="stable")]
    bounds = np.flatnonzero(np.diff(nrm[order])) + 1
    src, As, Bs, cs, ns = [], [], [], [], []
    for grp in np.split(order, bounds):
        g = G[grp]
        d = g[None, :, :] - g[:, None, :]  # d[a, b] = g_b - g_a
        ok = np.all((d * mj) % M == 0, axis=2) & np.all((d * mi) % M == 0, axis=2)
        nadm = ok.sum(axis=1)
        np.fill_diagonal(ok, False)
        a_idx, b_idx = np.nonzero(ok)
        if a_idx.size == 0:
            continue
        dd = d[a_idx, b_idx]
        src.append(grp[a_idx])
        As.append(dd * mj // M)
        Bs.append(dd * mi // M)
        cs.append(np.einsum("ij,ij->i", g[a_idx], g[b_idx]) / nrm[grp[a_idx]])
        ns.append(nadm[a_idx])
    src = np.concatenate(src)
    perm = np.argsort(src, kind="stable")
    counts = np.bincount(src, minlength=span**3)
    ptr = np.zeros(span**3 + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    A = np.concatenate(As)[perm].astype(np.int16)
    B = np.concatenate(Bs)[perm].astype(np.int16)
    cos = np.concatenate(cs)[perm]
    nadm = np.concatenate(ns)[perm]
    glen = np.sqrt(nrm[src[perm]].astype(float))
    return ptr, A, B, cos, nadm, glen


@dataclass
class LatticeRule:
    """Collision weights of every species pair on a ball-restricted grid.

    Attributes
    ----------
    act : int64 array (n^3,)
        Map from box index to active (ball) index, -1 outside the ball.
    pts : int64 array (K, 3)
        Integer coordinates of the active points.
    pairs : dict
        ``(i, j) -> (ptr, A, B, W)`` CSR collision tables.
    """

    spec: MixtureSpec
    grid: VelocityGrid
    act: np.ndarray = field(repr=False)
    pts: np.ndarray = field(repr=False)
    pairs: dict = field(repr=False)
    kp: np.ndarray = field(repr=False)
    c0: int = 0
    pp: np.ndarray = field(repr=False, default=None)
    actpad: np.ndarray = field(repr=False, default=None)
    gk: np.ndarray = field(repr=False, default=None)
    gflat: np.ndarray = field(repr=False, default=None)
    groups: list = field(repr=False, default_factory=list)

    @property
    def n_active(self) -> int:
        return self.pts.shape[0]

    @property
    def active_mask(self) -> np.ndarray:
        return self.act >= 0

    def velocities(self) -> np.ndarray:
        return self.grid.axis[self.pts]


def build_rule(spec: MixtureSpec, grid: VelocityGrid) -> LatticeRule:
    """Precompute the collision tables for ``spec`` on ``grid``."""
    spec.require_kinetic()
    n, h = grid.n_v, grid.spacing
    ints = integer_masses(spec.masses)
    idx = np.stack(np.meshgrid(*[np.arange(n)] * 3, indexing="ij"), -1).reshape(-1, 3)
    v = grid.axis[idx]
    inside = np.einsum("ij,ij->i", v, v) <= grid.v_max**2 * (1 + 1e-12)
    act = -np.ones(n**3, dtype=np.int64)
    act[inside] = np.arange(int(inside.sum()))
    pts = idx[inside].astype(np.int64)
    # Two active points are at most one ball diameter apart.
    max_g2 = int(math.floor((2.0 * grid.v_max / h) ** 2 + 1e-9))
    raw = {}
    for i in range(spec.n_species):
        for j in range(spec.n_species):
            key = (ints[i], ints[j])
            if key not in raw:
                raw[key] = _pair_offsets(n, ints[i], ints[j], max_g2)
    # Embed the box in a padded box so shifted indices never leave the array.
    pad = max(int(max(np.abs(t[1]).max(), np.abs(t[2]).max())) for t in raw.values())
    npd = n + 2 * pad
    actpad = -np.ones((npd, npd, npd), dtype=np.int32)
    actpad[pad:pad + n, pad:pad + n, pad:pad + n] = act.reshape(n, n, n)
    actpad = actpad.reshape(-1)
    pp = ((pts[:, 0] + pad) * npd + pts[:, 1] + pad) * npd + pts[:, 2] + pad
    span = 2 * n - 1
    kp = (pts[:, 0] * span + pts[:, 1]) * span + pts[:, 2]
    c0 = ((n - 1) * span + (n - 1)) * span + (n - 1)
    # Relative velocities with a nonempty collision table.
    nonempty = np.zeros(span**3, dtype=bool)
    for t in raw.values():
        nonempty |= np.diff(t[0]) > 0
    gk = np.flatnonzero(nonempty)
    gi = np.stack(np.unravel_index(gk, (span, span, span)), -1) - (n - 1)
    gflat = (gi[:, 0] * npd + gi[:, 1]) * npd + gi[:, 2]
    pairs = {}
    for i in range(spec.n_species):
        for j in range(spec.n_species):
            ptr, A, B, cos, nadm, glen = raw[(ints[i], ints[j])]
            W = (
                float(spec.phi_const[i, j])
                * (glen * h) ** spec.gamma
                * spec.angular[i][j](cos)
                * (4.0 * math.pi / nadm)
                * h**3
            )
            af = (A[:, 0].astype(np.int64) * npd + A[:, 1]) * npd + A[:, 2]
            bf = (B[:, 0].astype(np.int64) * npd + B[:, 1]) * npd + B[:, 2]
            pairs[(i, j)] = (ptr, af, bf, np.ascontiguousarray(W))
    groups = _pair_groups(spec, ints, raw, h, npd)
    return LatticeRule(spec, grid, act, pts, pairs, kp, c0, pp, actpad, gk, gflat, groups)


def _pair_groups(spec: MixtureSpec, ints, raw, h: float, npd: int) -> list:
    """Bundle species pairs that share a collision table and angular law.

    Each group is ``(rows, cols, C, ptr, A, B, W0)``: the pairs
    ``rows x cols`` use weights ``C[a, b] * W0``.
    """
    groups = []
    for key, (ptr, A, B, cos, nadm, glen) in raw.items():
        rows = [i for i in range(spec.n_species) if ints[i] == key[0]]
        cols = [j for j in range(spec.n_species) if ints[j] == key[1]]
        laws = {spec.angular[i][j] for i in rows for j in cols}
        blocks = [(rows, cols)] if len(laws) == 1 else [([i], [j]) for i in rows for j in cols]
        af = (A[:, 0].astype(np.int64) * npd + A[:, 1]) * npd + A[:, 2]
        bf = (B[:, 0].astype(np.int64) * npd + B[:, 1]) * npd + B[:, 2]
        for r, c in blocks:
            law = spec.angular[r[0]][c[0]]
            W0 = (glen * h) ** spec.gamma * law(cos) * (4.0 * math.pi / nadm) * h**3
            C = np.ascontiguousarray(spec.phi_const[np.ix_(r, c)], dtype=float)
            groups.append((np.array(r), np.array(c), C, ptr, af, bf, np.ascontiguousarray(W0)))
    return groups


@nb.njit(cache=True)
def _bilinear(gk, gflat, pp, actpad, ptr, A, B, W, C, F, G, out):
    """Gain minus loss of a group of species pairs sharing one table.

    ``out[a, p] += sum_b C[a, b] sum_{q, g'} W (F_a(p') G_b(q') - F_a(p) G_b(q))``.

    The outer loop runs over relative velocities ``g`` (flat index ``gk``
    into the CSR table, flat padded offset ``gflat``) so each table block
    is reused across all ``p`` while it sits in cache; ``q = p - g``.
    """
    na = pp.shape[0]
    ni = F.shape[0]
    nj = G.shape[0]
    gain = np.zeros((ni, nj))
    for t in range(gk.shape[0]):
        k = gk[t]
        e0 = ptr[k]
        e1 = ptr[k + 1]
        for ip in range(na):
            qf = pp[ip] - gflat[t]
            iq = actpad[qf]
            if iq < 0:
                continue
            gain[:, :] = 0.0
            lossw = 0.0
            for e in range(e0, e1):
                ipp = actpad[pp[ip] + A[e]]
                iqp = actpad[qf - B[e]]
                if ipp < 0 or iqp < 0:
                    continue
                w = W[e]
                lossw += w
                for a in range(ni):
                    wf = w * F[a, ipp]
                    for b in range(nj):
                        gain[a, b] += wf * G[b, iqp]
            for a in range(ni):
                s = 0.0
                for b in range(nj):
                    s += C[a, b] * (gain[a, b] - lossw * F[a, ip] * G[b, iq])
                out[a, ip] += s


@nb.njit(cache=True)
def _assemble(kp, c0, pp, actpad, ptr, A, B, W, si, sj, L, off_i, off_j):
    """Add the (i, j) block rows of the linearized operator.

    With ``s = sqrt(mu)`` the operator acting on ``g`` is
    ``s_i(p)^{-1} [Q_ij(mu_i, s_j g_j) + Q_ij(s_i g_i, mu_j)](p)``.
    """
    na = kp.shape[0]
    for ip in range(na):
        r = off_i + ip
        lossp = 0.0
        for iq in range(na):
            k = kp[ip] - kp[iq] + c0
            sq = sj[iq]
            lossq = 0.0
            for e in range(ptr[k], ptr[k + 1]):
                ipp = actpad[pp[ip] + A[e]]
                iqp = actpad[pp[iq] - B[e]]
                if ipp < 0 or iqp < 0:
                    continue
                w = W[e] * sq
                L[r, off_i + ipp] += w * sj[iqp]
                L[r, off_j + iqp] += w * si[ipp]
                lossq += W[e]
            if lossq != 0.0:
                lossp += lossq * sq * sq
                L[r, off_j + iq] -= lossq * sq * si[ip]
        L[r, r] -= lossp


@nb.njit(cache=True)
def _symmetrize(L):
    """Average L with its transpose in place; return max |L - L^T| / max |L|."""
    m = L.shape[0]
    worst = 0.0
    big = 0.0
    for i in range(m):
        for j in range(i + 1, m):
            d = abs(L[i, j] - L[j, i])
            if d > worst:
                worst = d
            a = 0.5 * (L[i, j] + L[j, i])
            L[i, j] = a
            L[j, i] = a
            if abs(a) > big:
                big = abs(a)
        if abs(L[i, i]) > big:
            big = abs(L[i, i])
    return worst / big if big > 0 else 0.0


def collide(rule: LatticeRule, F: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Bilinear collision operator on active points.

    Parameters
    ----------
    F, G : arrays of shape (N, K)
        Distributions on the active points.

    Returns
    -------
    ndarray (N, K)
        ``Q_i(F, G) = sum_j Q_ij(F_i, G_j)``.
    """
    F = np.ascontiguousarray(F, dtype=float)
    G = np.ascontiguousarray(G, dtype=float)
    out = np.zeros_like(F)
    for rows, cols, C, ptr, A, B, W0 in rule.groups:
        part = np.zeros((len(rows), F.shape[1]))
        _bilinear(rule.gk, rule.gflat, rule.pp, rule.actpad, ptr, A, B, W0, C,
                  np.ascontiguousarray(F[rows]), np.ascontiguousarray(G[cols]), part)
        out[rows] += part
    return out


def assemble_dense(rule: LatticeRule, sqrt_mu: np.ndarray) -> np.ndarray:
    """Dense linearized operator on active points (before symmetrization)."""
    N, K = sqrt_mu.shape
    L = np.zeros((N * K, N * K))
    for (i, j), (ptr, A, B, W) in rule.pairs.items():
        _assemble(rule.kp, rule.c0, rule.pp, rule.actpad, ptr, A, B, W, sqrt_mu[i], sqrt_mu[j], L, i * K, j * K)
    return L


def symmetrize(L: np.ndarray) -> float:
    return float(_symmetrize(L))
