"""Hard-sphere collision operators around the standard Maxwellian.

Q(f, g) is the symmetrized bilinear operator with cross-section |(eta - eta*) . omega|
and the 1/2 prefactor.  L u = 2 mu^{-1/2} Q(mu, mu^{1/2} u) = -nu u + K u and
Gamma(g, h) = mu^{-1/2} Q(mu^{1/2} g, mu^{1/2} h).

The explicit constants of nu and k used here are the ones that follow from
that definition of Q with mu = (2 pi)^{-3/2} exp(-|eta|^2/2):

    nu(r) = 2 pi [(r + 1/r) erf(r/sqrt 2) + sqrt(2/pi) exp(-r^2/2)]
    k(eta, eta*) = 4/sqrt(2 pi) |V|^{-1} exp(-|V|^2/8 - (|eta*|^2-|eta|^2)^2/(8|V|^2))
                   - 1/sqrt(2 pi) |V| exp(-(|eta|^2 + |eta*|^2)/4),   V = eta* - eta.

They are cross-checked against a Monte Carlo evaluation of Q in the tests.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np
from scipy.special import erf

from .frames import mu
from .grids import VelocityGrid

GAIN_COEF = 4.0 / np.sqrt(2 * np.pi)
LOSS_COEF = 1.0 / np.sqrt(2 * np.pi)
REF_SIGMA = 1.0
DENSE_LIMIT_BYTES = 2 * 1024**3


def nu(eta):
    """Collision frequency nu(|eta|) = int int |V.omega| mu(eta*) d omega d eta*."""
    eta = np.asarray(eta, dtype=float)
    r = np.sqrt(np.sum(eta * eta, axis=-1)) if eta.ndim and eta.shape[-1] == 3 else np.abs(eta)
    return nu_of_speed(r)


def nu_of_speed(r):
    r = np.asarray(r, dtype=float)
    small = r < 1e-4
    rs = np.where(small, 1.0, r)
    val = (rs + 1 / rs) * erf(rs / np.sqrt(2)) + np.sqrt(2 / np.pi) * np.exp(-0.5 * rs * rs)
    series = np.sqrt(2 / np.pi) * (2 + r * r / 3)
    return 2 * np.pi * np.where(small, series, val)


def kernel_k(eta, eta_star):
    """Two-term kernel of K; infinite at coincidence."""
    a = np.asarray(eta, dtype=float)
    b = np.asarray(eta_star, dtype=float)
    V = b - a
    v2 = np.sum(V * V, axis=-1)
    d = np.sum(b * b, axis=-1) - np.sum(a * a, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.sqrt(v2)
        k2 = GAIN_COEF / v * np.exp(-v2 / 8 - d * d / (8 * v2))
    k1 = LOSS_COEF * v * np.exp(-(np.sum(a * a, axis=-1) + np.sum(b * b, axis=-1)) / 4)
    return np.where(v2 > 0, k2 - k1, np.inf)


@dataclass(frozen=True)
class NuProfile:
    nu0: float
    nu1: float

    def __call__(self, eta):
        return nu(eta)


def nu_profile(grid: VelocityGrid) -> NuProfile:
    """nu0 = min over the grid; nu1 = smallest constant with nu <= nu1 (1 + |eta|) there."""
    v = nu_of_speed(grid.speed)
    return NuProfile(nu0=float(v.min()), nu1=float(np.max(v / (1 + grid.speed))))


# ------------------------------------------------------------ invariant basis


class InvariantBasis:
    """Collision invariants chi_0..chi_4 and the Burnette functions A_j, B_kl."""

    @staticmethod
    def chi(k, eta):
        eta = np.asarray(eta, dtype=float)
        s = np.sqrt(mu(eta))
        if k == 0:
            return s
        if k in (1, 2, 3):
            return eta[..., k - 1] * s
        if k == 4:
            return (np.sum(eta * eta, axis=-1) - 3) / np.sqrt(6) * s
        raise ValueError("chi index must be 0..4")

    @staticmethod
    def A(j, eta):
        eta = np.asarray(eta, dtype=float)
        r2 = np.sum(eta * eta, axis=-1)
        return eta[..., j - 1] * (r2 - 5) / np.sqrt(10) * np.sqrt(mu(eta))

    @staticmethod
    def B(k, l, eta):
        eta = np.asarray(eta, dtype=float)
        r2 = np.sum(eta * eta, axis=-1)
        return (eta[..., k - 1] * eta[..., l - 1] - (k == l) * r2 / 3) * np.sqrt(mu(eta))

    def chis(self, eta):
        """Stack of chi_0..chi_4 along a new last axis."""
        return np.stack([self.chi(k, eta) for k in range(5)], axis=-1)


BASIS = InvariantBasis()


def project_P(u, grid: VelocityGrid, gram_corrected=False):
    """Projection onto span{chi_k} with the grid inner product (last axis = velocity)."""
    X = BASIS.chis(grid.nodes)
    u = np.asarray(u, dtype=float)
    coef = (u * grid.weights) @ X
    if gram_corrected:
        G = X.T @ (X * grid.weights[:, None])
        coef = np.linalg.solve(G, coef.reshape(-1, 5).T).T.reshape(coef.shape)
    return coef @ X.T


def burnette_gram(grid: VelocityGrid):
    """Gram tables of A_j and B_kl with the reference values they should reproduce."""
    e = grid.nodes
    A = [BASIS.A(j, e) for j in (1, 2, 3)]
    pairs = [(k, l) for k in (1, 2, 3) for l in (1, 2, 3)]
    B = {p: BASIS.B(*p, e) for p in pairs}
    rows = []
    for i in range(3):
        for j in range(3):
            rows.append(("A", (i + 1,), (j + 1,), grid.inner(A[i], A[j]), float(i == j)))
    for i in range(3):
        for p in pairs:
            rows.append(("AB", (i + 1,), p, grid.inner(A[i], B[p]), 0.0))
    for p in pairs:
        for q in pairs:
            i, j = p
            k, l = q
            ref = (i == k) * (j == l) + (i == l) * (j == k) - 2.0 / 3.0 * (i == j) * (k == l)
            rows.append(("B", p, q, grid.inner(B[p], B[q]), float(ref)))
    return rows


# ------------------------------------------------------- lattice kernel rule


def _angular_moments(s):
    """A(s) = int_{S^2} exp(-s^2 t^2/2), B(s) = int_{S^2} t^2 exp(-s^2 t^2/2), t = omega.n."""
    s = np.asarray(s, dtype=float)
    small = s < 1e-3
    ss = np.where(small, 1.0, s)
    E = erf(ss / np.sqrt(2))
    r2p = np.sqrt(2 * np.pi)
    A = 2 * np.pi * r2p * E / ss
    B = 2 * np.pi * (r2p * E / ss**3 - 2 * np.exp(-0.5 * ss * ss) / ss**2)
    A = np.where(small, 4 * np.pi * (1 - s**2 / 6 + s**4 / 40), A)
    B = np.where(small, 2 * np.pi * (2.0 / 3 - s**2 / 5 + s**4 / 28), B)
    return A, B


# stencil offsets: 6 faces then 12 edges, with (axis a, sign a, axis b, sign b)
_FACES = np.array([(a, s, -1, 0) for a in range(3) for s in (-1, 1)], dtype=np.int64)
_EDGES = np.array([(a, sa, b, sb) for a in range(3) for b in range(a + 1, 3)
                   for sa in (-1, 1) for sb in (-1, 1)], dtype=np.int64)
_STENCIL = np.concatenate([_FACES, _EDGES])


@nb.njit(cache=True)
def _pair(a, b):
    # index of the unordered axis pair (0,1), (0,2), (1,2)
    return a + b - 1


@nb.njit(cache=True)
def _smooth_gain(e, node, sigma):
    v0 = node[0] - e[0]
    v1 = node[1] - e[1]
    v2 = node[2] - e[2]
    vv = v0 * v0 + v1 * v1 + v2 * v2
    dot = e[0] * v0 + e[1] * v1 + e[2] * v2
    return GAIN_COEF * np.exp(-0.25 * vv - 0.5 * dot + vv / (2.0 * sigma * sigma))


@nb.njit(cache=True)
def _smooth_loss(e, node, sigma):
    v0 = node[0] - e[0]
    v1 = node[1] - e[1]
    v2 = node[2] - e[2]
    vv = v0 * v0 + v1 * v1 + v2 * v2
    s2 = e[0] * e[0] + e[1] * e[1] + e[2] * e[2]
    t2 = node[0] * node[0] + node[1] * node[1] + node[2] * node[2]
    return LOSS_COEF * np.exp(-(s2 + t2) * 0.25 + vv / (2.0 * sigma * sigma))


@nb.njit(cache=True)
def _row_offdiag(i, nodes, weights, row):
    # k(eta_i, eta_j) w_j for j != i
    e0, e1, e2 = nodes[i, 0], nodes[i, 1], nodes[i, 2]
    s2 = e0 * e0 + e1 * e1 + e2 * e2
    for j in range(nodes.shape[0]):
        if j == i:
            row[j] = 0.0
            continue
        v0 = nodes[j, 0] - e0
        v1 = nodes[j, 1] - e1
        v2 = nodes[j, 2] - e2
        vv = v0 * v0 + v1 * v1 + v2 * v2
        v = np.sqrt(vv)
        dot = e0 * v0 + e1 * v1 + e2 * v2
        k2 = GAIN_COEF / v * np.exp(-0.25 * vv - 0.5 * dot - dot * dot / (2.0 * vv))
        k1 = LOSS_COEF * v * np.exp(-(2.0 * s2 + 2.0 * dot + vv) * 0.25)
        row[j] = (k2 - k1) * weights[j]


@nb.njit(cache=True)
def _corrections(nodes, weights, n1, spacing, sigma, A_s, B_s, diag, face, edge, interior):
    """Per-row weights of the corrected lattice rule.

    The singular behaviour of k near eta_j = eta_i is handled by two reference
    functions with closed-form moments, R = exp(-(eta.V)^2/(2|V|^2) - |V|^2/(2 sigma^2))/|V|
    for the gain part and R1 = |V| exp(-|V|^2/(2 sigma^2)) for the loss part.
    The diagonal and 18 neighbour weights make the lattice sum exact for R p and
    R1 p with p any polynomial of degree <= 2; they multiply the smooth factors
    k2/R and k1/R1.  ``face[i, a]`` and ``edge[i, p]`` hold (gain, loss) pairs.
    """
    n = nodes.shape[0]
    inv2s = 1.0 / (2.0 * sigma * sigma)
    sig2 = sigma * sigma
    D2 = spacing * spacing
    M01 = 8.0 * np.pi * sig2 * sig2
    M21 = (32.0 * np.pi / 3.0) * sig2 * sig2 * sig2
    for i in range(n):
        e0, e1, e2 = nodes[i, 0], nodes[i, 1], nodes[i, 2]
        S0 = 0.0
        S1 = 0.0
        S2 = np.zeros((3, 3))
        S21 = np.zeros((3, 3))
        vec = np.zeros(3)
        for j in range(n):
            if j == i:
                continue
            vec[0] = nodes[j, 0] - e0
            vec[1] = nodes[j, 1] - e1
            vec[2] = nodes[j, 2] - e2
            vv = vec[0] * vec[0] + vec[1] * vec[1] + vec[2] * vec[2]
            v = np.sqrt(vv)
            dot = e0 * vec[0] + e1 * vec[1] + e2 * vec[2]
            g = np.exp(-vv * inv2s)
            R = np.exp(-dot * dot / (2.0 * vv)) * g / v * weights[j]
            R1 = v * g * weights[j]
            S0 += R
            S1 += R1
            for a in range(3):
                for b in range(a, 3):
                    S2[a, b] += R * vec[a] * vec[b]
                    S21[a, b] += R1 * vec[a] * vec[b]
        s2 = e0 * e0 + e1 * e1 + e2 * e2
        s = np.sqrt(s2)
        nh = np.zeros(3)
        if s > 0:
            nh[0], nh[1], nh[2] = e0 / s, e1 / s, e2 / s
        al = 0.5 * (A_s[i] - B_s[i])
        be = 0.5 * (3.0 * B_s[i] - A_s[i])
        c0 = sig2 * A_s[i] - S0
        c01 = M01 - S1
        ii = i // (n1 * n1)
        jj = (i // n1) % n1
        kk = i % n1
        inner = ii > 0 and ii < n1 - 1 and jj > 0 and jj < n1 - 1 and kk > 0 and kk < n1 - 1
        interior[i] = inner
        if inner:
            for a in range(3):
                fg = (2.0 * sig2 * sig2 * (al + be * nh[a] * nh[a]) - S2[a, a]) / (2.0 * D2)
                fl = (M21 - S21[a, a]) / (2.0 * D2)
                face[i, a, 0] = fg
                face[i, a, 1] = fl
                c0 -= 2.0 * fg
                c01 -= 2.0 * fl
            for a in range(3):
                for b in range(a + 1, 3):
                    p = _pair(a, b)
                    edge[i, p, 0] = (2.0 * sig2 * sig2 * be * nh[a] * nh[b] - S2[a, b]) / (4.0 * D2)
                    edge[i, p, 1] = -S21[a, b] / (4.0 * D2)
        diag[i] = GAIN_COEF * c0 - c01 * LOSS_COEF * np.exp(-0.5 * s2)


@nb.njit(cache=True)
def _corr_entry(i, j, off, nodes, sigma, face, edge, interior):
    # correction that row i places on neighbour j along stencil offset ``off``
    if not interior[i]:
        return 0.0
    a, sa, b, sb = off[0], off[1], off[2], off[3]
    if b < 0:
        cg = face[i, a, 0]
        cl = face[i, a, 1]
    else:
        p = _pair(a, b)
        cg = sa * sb * edge[i, p, 0]
        cl = sa * sb * edge[i, p, 1]
    return cg * _smooth_gain(nodes[i], nodes[j], sigma) - cl * _smooth_loss(nodes[i], nodes[j], sigma)


@nb.njit(cache=True)
def _fill_row(i, nodes, weights, n1, sigma, diag, face, edge, interior, stencil, row):
    """Row i of the symmetrized corrected matrix (entries approximate k_ij w_j)."""
    _row_offdiag(i, nodes, weights, row)
    row[i] = diag[i]
    t = np.empty(3, dtype=np.int64)
    t[0] = i // (n1 * n1)
    t[1] = (i // n1) % n1
    t[2] = i % n1
    for m in range(stencil.shape[0]):
        off = stencil[m]
        u = t.copy()
        u[off[0]] += off[1]
        if off[2] >= 0:
            u[off[2]] += off[3]
        if u[0] < 0 or u[0] >= n1 or u[1] < 0 or u[1] >= n1 or u[2] < 0 or u[2] >= n1:
            continue
        j = (u[0] * n1 + u[1]) * n1 + u[2]
        back = off.copy()
        back[1] = -off[1]
        back[3] = -off[3]
        cij = _corr_entry(i, j, off, nodes, sigma, face, edge, interior)
        cji = _corr_entry(j, i, back, nodes, sigma, face, edge, interior)
        row[j] += 0.5 * cij + 0.5 * cji * weights[j] / weights[i]


@nb.njit(cache=True)
def _build_dense(nodes, weights, n1, sigma, diag, face, edge, interior, stencil, out):
    for i in range(nodes.shape[0]):
        _fill_row(i, nodes, weights, n1, sigma, diag, face, edge, interior, stencil, out[i])


@nb.njit(cache=True)
def _apply_rows(nodes, weights, n1, sigma, diag, face, edge, interior, stencil, U, out):
    n = nodes.shape[0]
    row = np.empty(n)
    for i in range(n):
        _fill_row(i, nodes, weights, n1, sigma, diag, face, edge, interior, stencil, row)
        for c in range(U.shape[1]):
            acc = 0.0
            for j in range(n):
                acc += row[j] * U[j, c]
            out[i, c] = acc


@nb.njit(cache=True)
def _abs_row_sums(nodes, weights, n1, sigma, diag, face, edge, interior, stencil, out):
    n = nodes.shape[0]
    row = np.empty(n)
    for i in range(n):
        _fill_row(i, nodes, weights, n1, sigma, diag, face, edge, interior, stencil, row)
        acc = 0.0
        for j in range(n):
            acc += abs(row[j])
        out[i] = acc


class KernelMatrix:
    """Lattice discretization of K on a velocity grid.

    ``matrix[i, j]`` approximates k(eta_i, eta_j) w_j.  Away from the diagonal
    the entries are the kernel values themselves; the singular neighbourhood is
    handled by a corrected lattice rule whose local weights are averaged
    between rows i and j, so that matrix[i, j] / w_j is symmetric.  When the
    dense matrix would exceed ``DENSE_LIMIT_BYTES`` it is never formed and
    ``apply`` streams rows instead.
    """

    def __init__(self, grid: VelocityGrid, dense=None, sigma=REF_SIGMA):
        self.grid = grid
        self.sigma = float(sigma)
        self.nu = nu_of_speed(grid.speed)
        A_s, B_s = _angular_moments(grid.speed)
        n = grid.size
        self._diag = np.empty(n)
        self._face = np.zeros((n, 3, 2))
        self._edge = np.zeros((n, 3, 2))
        self._interior = np.zeros(n, dtype=np.bool_)
        _corrections(grid.nodes, grid.weights, grid.n, grid.spacing, self.sigma, A_s, B_s,
                     self._diag, self._face, self._edge, self._interior)
        nbytes = n * n * 8
        if dense is None:
            dense = nbytes <= DENSE_LIMIT_BYTES
        if dense and nbytes > DENSE_LIMIT_BYTES:
            raise MemoryError(f"dense kernel matrix would need {nbytes / 1e9:.1f} GB")
        self.matrix = None
        if dense:
            self.matrix = np.empty((n, n))
            _build_dense(*self._args(), self.matrix)

    def _args(self):
        g = self.grid
        return (g.nodes, g.weights, g.n, self.sigma, self._diag, self._face, self._edge,
                self._interior, _STENCIL)

    def apply(self, U):
        """K acting on the velocity axis (axis 0) of U."""
        U = np.asarray(U, dtype=float)
        flat = U.reshape(U.shape[0], -1)
        if self.matrix is not None:
            return (self.matrix @ flat).reshape(U.shape)
        out = np.empty_like(flat)
        _apply_rows(*self._args(), np.ascontiguousarray(flat), out)
        return out.reshape(U.shape)

    def abs_row_sums(self):
        """sum_j |K[i, j]|, the discrete row integrals of |k|."""
        if self.matrix is not None:
            return np.abs(self.matrix).sum(axis=1)
        out = np.empty(self.grid.size)
        _abs_row_sums(*self._args(), out)
        return out

    def dump(self, fh, fmt="%.12e"):
        """Write the dense matrix as a plain-text table."""
        if self.matrix is None:
            raise ValueError("matrix-free kernel has no dense table to dump")
        np.savetxt(fh, self.matrix, fmt=fmt)

    def weighted(self, y, params):
        """K_phi = phi K phi^{-1} at spatial point y (entries times phi_i/phi_j)."""
        return WeightedKernel(self, y, params)


class WeightedKernel:
    def __init__(self, base: KernelMatrix, y, params):
        from .frames import weight_phi

        self.base = base
        self.grid = base.grid
        self.nu = base.nu
        y = np.asarray(y, dtype=float)
        self.phi = weight_phi(np.broadcast_to(y, base.grid.nodes.shape), base.grid.nodes, params)

    @property
    def matrix(self):
        m = self.base.matrix
        if m is None:
            raise ValueError("matrix-free kernel has no dense weighted table")
        return m * self.phi[:, None] / self.phi[None, :]

    def apply(self, W):
        W = np.asarray(W, dtype=float)
        p = self.phi.reshape((-1,) + (1,) * (W.ndim - 1))
        return p * self.base.apply(W / p)

    def abs_row_sums(self):
        return np.abs(self.matrix).sum(axis=1)


def build_kernel_matrix(grid: VelocityGrid, weighted=None, dense=None):
    """Kernel matrix of K; with ``weighted=(y, params)`` returns the K_phi view."""
    K = KernelMatrix(grid, dense=dense)
    if weighted is not None:
        y, params = weighted
        return K.weighted(y, params)
    return K


def apply_L(u, kernel):
    """L u = -nu u + K u along axis 0."""
    u = np.asarray(u, dtype=float)
    if u.shape[0] != kernel.grid.size:
        raise ValueError(f"slice has {u.shape[0]} velocity nodes, kernel grid has {kernel.grid.size}")
    nuv = kernel.nu.reshape((-1,) + (1,) * (u.ndim - 1))
    return -nuv * u + kernel.apply(u)


class ConservativeL:
    """L restricted so that span{chi_k} is its exact discrete null space.

    L_c = (I - P) L (I - P) with P the grid-orthogonal projection.  It is
    symmetric in the grid inner product, annihilates chi_k exactly and its
    range is orthogonal to chi_k, so a discrete collision step conserves
    mass, momentum and energy to rounding.
    """

    def __init__(self, kernel: KernelMatrix):
        g = kernel.grid
        self.kernel = kernel
        self.grid = g
        X = BASIS.chis(g.nodes)
        G = X.T @ (X * g.weights[:, None])
        # grid-orthonormal basis of the invariant span
        C = np.linalg.cholesky(G)
        self.Q = np.linalg.solve(C, X.T).T
        self.LQ = apply_L(self.Q, kernel)

    def project(self, U):
        U = np.asarray(U, dtype=float)
        flat = U.reshape(U.shape[0], -1)
        c = self.Q.T @ (flat * self.grid.weights[:, None])
        return (self.Q @ c).reshape(U.shape)

    def apply(self, U):
        U = np.asarray(U, dtype=float)
        flat = U.reshape(U.shape[0], -1)
        w = self.grid.weights[:, None]
        c = self.Q.T @ (flat * w)
        LU = apply_L(flat, self.kernel) - self.LQ @ c
        d = self.Q.T @ (LU * w)
        return (LU - self.Q @ d).reshape(U.shape)

    def dense(self):
        """Explicit matrix of L_c (small grids only)."""
        return self.apply(np.eye(self.grid.size))


# --------------------------------------------------------- pointwise explicit L


def apply_L_pointwise(u_fn, eta, n_r=48, n_t=64, n_phi=48):
    """Explicit -nu u + int k u at arbitrary velocities via polar quadrature.

    The integral is taken in polar coordinates around eta, where the 1/|V|
    singularity is absorbed by the r^2 Jacobian.  ``u_fn`` maps (..., 3)
    velocities to values.
    """
    eta = np.atleast_2d(np.asarray(eta, dtype=float))
    x, wx = np.polynomial.legendre.leggauss(n_r)
    r_max = 14.0
    r = 0.5 * r_max * (x + 1)
    wr = 0.5 * r_max * wx
    t, wt = np.polynomial.legendre.leggauss(n_t)
    ph = 2 * np.pi * np.arange(n_phi) / n_phi
    wph = 2 * np.pi / n_phi
    out = np.empty(len(eta))
    for m, e in enumerate(eta):
        s = np.linalg.norm(e)
        n = e / s if s > 0 else np.array([0.0, 0.0, 1.0])
        a = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        e1 = a - np.dot(a, n) * n
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(n, e1)
        st = np.sqrt(1 - t * t)
        om = (t[:, None, None] * n + st[:, None, None] * (np.cos(ph)[None, :, None] * e1
                                                           + np.sin(ph)[None, :, None] * e2))
        pts = e + r[:, None, None, None] * om[None]
        kv = kernel_k(np.broadcast_to(e, pts.shape), pts)
        vals = kv * u_fn(pts) * (r * r)[:, None, None]
        out[m] = np.einsum("rtp,r,t->", vals, wr, wt) * wph - nu(e) * u_fn(e)
    return out


# ---------------------------------------------------------------- Monte Carlo


def _sample_sphere(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1)[:, None]


def q_bilinear_mc(f, g, eta, n_samples=200_000, seed=0, block=50_000):
    """Monte Carlo value and standard error of the symmetrized Q(f, g)(eta).

    eta* is drawn from mu and omega uniformly on the sphere, in blocks with
    independent deterministic substreams.  ``f`` and ``g`` map (..., 3)
    velocities to values.
    """
    eta = np.asarray(eta, dtype=float).reshape(3)
    ss = np.random.SeedSequence(seed)
    sums = 0.0
    sq = 0.0
    done = 0
    for child in ss.spawn(int(np.ceil(n_samples / block))):
        rng = np.random.default_rng(child)
        m = min(block, n_samples - done)
        es = rng.normal(size=(m, 3))
        om = _sample_sphere(rng, m)
        V = eta - es
        c = np.sum(V * om, axis=1)
        ep = eta - c[:, None] * om
        esp = es + c[:, None] * om
        e0 = np.broadcast_to(eta, es.shape)
        brk = f(ep) * g(esp) + f(esp) * g(ep) - f(e0) * g(es) - f(es) * g(e0)
        x = 0.5 * 4 * np.pi * np.abs(c) * brk / mu(es)
        sums += x.sum()
        sq += (x * x).sum()
        done += m
    mean = sums / done
    var = max(sq / done - mean * mean, 0.0)
    return mean, np.sqrt(var / done)


def linearized_L_mc(u_fn, eta, n_samples=200_000, seed=0):
    """2 mu^{-1/2} Q(mu, mu^{1/2} u)(eta) by Monte Carlo, with standard error."""
    eta = np.asarray(eta, dtype=float)
    g = lambda v: np.sqrt(mu(v)) * u_fn(v)  # noqa: E731
    val, err = q_bilinear_mc(mu, g, eta, n_samples, seed)
    scale = 2.0 / np.sqrt(mu(eta))
    return val * scale, err * scale


def gamma_mc(g_fn, h_fn, eta, n_samples=200_000, seed=0):
    """Gamma(g, h)(eta) = mu^{-1/2} Q(mu^{1/2} g, mu^{1/2} h)(eta) by Monte Carlo."""
    eta = np.asarray(eta, dtype=float)
    G = lambda v: np.sqrt(mu(v)) * g_fn(v)  # noqa: E731
    H = lambda v: np.sqrt(mu(v)) * h_fn(v)  # noqa: E731
    val, err = q_bilinear_mc(G, H, eta, n_samples, seed)
    scale = 1.0 / np.sqrt(mu(eta))
    return val * scale, err * scale


def gamma_phi(wg_fn, wh_fn, y, eta, params, n_samples=200_000, seed=None):
    """phi Gamma(phi^{-1} w_g, phi^{-1} w_h) at (y, eta)."""
    from .frames import weight_phi

    y = np.asarray(y, dtype=float)
    seed = params.seed if seed is None else seed

    def unweight(fn):
        return lambda v: fn(v) / weight_phi(np.broadcast_to(y, np.shape(v)), v, params)

    val, err = gamma_mc(unweight(wg_fn), unweight(wh_fn), eta, n_samples, seed)
    p = weight_phi(y, eta, params)
    return val * p, err * p
