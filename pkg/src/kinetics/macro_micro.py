"""Macro-micro decomposition, ball elliptic solvers and the test functions of the L2 argument.

Phase-space fields are arrays of shape (n_y, n_v): spatial index first
(active nodes of a SpatialGrid), velocity index second (VelocityGrid nodes).

Elliptic problems are discretized on the Cartesian SpatialGrid: the 7-point
Laplacian at nodes inside the ball, and one extrapolation row per ghost node.
A ghost value is read off a quadratic along the normal line through the
ghost, fitted to triquadratic interpolants at depths spacing and
2 spacing inside the ball.  Neumann data use q(s) = c0 + c2 s^2, homogeneous
Dirichlet data q(s) = c1 s + c2 s^2 (s = depth), which keeps the boundary
closure third-order and the solution second-order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pyamg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .collision import BASIS, InvariantBasis
from .frames import SimParams, mu, mu_tilde
from .grids import SpatialGrid, VelocityGrid

SQRT6 = np.sqrt(6.0)
SQRT10 = np.sqrt(10.0)


# -------------------------------------------------------------- decomposition


@dataclass
class MacroFields:
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    q: np.ndarray
    d: np.ndarray


def _check(u, vgrid, sgrid):
    u = np.asarray(u, dtype=float)
    if u.shape != (sgrid.size, vgrid.size):
        raise ValueError(f"field shape {u.shape} does not match grids ({sgrid.size}, {vgrid.size})")
    return u


def decompose(u, vgrid: VelocityGrid, sgrid: SpatialGrid, params: SimParams) -> MacroFields:
    """a, b, c, q, d of u.

    c = <u, chi_4> mu_tilde^{1/2} + q, so that reconstruct() is an exact identity.
    """
    u = _check(u, vgrid, sgrid)
    X = BASIS.chis(vgrid.nodes)
    coef = (u * vgrid.weights) @ X
    mt = np.sqrt(mu_tilde(sgrid.pos, params.h))
    a = coef[:, 0] * mt
    b = coef[:, 1:4] * mt[:, None]
    q = params.h**2 * np.sum(sgrid.pos**2, axis=1) / SQRT6 * a
    c = coef[:, 4] * mt + q
    d = (u - coef @ X.T) * mt[:, None]
    return MacroFields(a=a, b=b, c=c, q=q, d=d)


def reconstruct(m: MacroFields, vgrid: VelocityGrid, sgrid: SpatialGrid, params: SimParams):
    """u = {a chi_0 + b.chi + (c - q) chi_4} mu_tilde^{-1/2} + d mu_tilde^{-1/2}."""
    X = BASIS.chis(vgrid.nodes)
    inv = 1.0 / np.sqrt(mu_tilde(sgrid.pos, params.h))
    coef = np.column_stack([m.a, m.b, m.c - m.q])
    return (coef @ X.T + m.d) * inv[:, None]


def conservation_functionals(u, vgrid: VelocityGrid, sgrid: SpatialGrid, params: SimParams):
    """Mass, energy and angular momentum of u M^{1/2} over the ball x R^3."""
    u = _check(u, vgrid, sgrid)
    y = sgrid.pos
    Mh = np.sqrt(mu_tilde(y, params.h))[:, None] * vgrid.sqrt_mu[None, :]
    g = u * Mh * vgrid.weights
    vol = sgrid.volume
    gv = g.sum(axis=1)
    mass = vol @ gv
    e_eta = g @ np.sum(vgrid.nodes**2, axis=1)
    energy = vol @ (e_eta + params.h**2 * np.sum(y * y, axis=1) * gv)
    mom = g @ vgrid.nodes
    ang = vol @ np.cross(y, mom)
    return float(mass), float(energy), ang


# ------------------------------------------------------ triquadratic sampling


def _lagrange3(t):
    """Quadratic Lagrange weights on nodes -1, 0, 1 and their derivatives."""
    w = np.stack([0.5 * t * (t - 1), 1 - t * t, 0.5 * t * (t + 1)], axis=-1)
    dw = np.stack([t - 0.5, -2 * t, t + 0.5], axis=-1)
    return w, dw


def _inward_centers(sgrid: SpatialGrid, g, p):
    """Stencil centres among rint(g) and its inward shifts minimizing the outermost radius."""
    n = sgrid.nbox
    base = np.rint(g).astype(np.int64)
    r = np.linalg.norm(p, axis=1)
    step = np.where(r[:, None] > 0, -np.sign(p), 0).astype(np.int64)
    offs = np.array([-1, 0, 1])
    cube = np.stack(np.meshgrid(offs, offs, offs, indexing="ij"), axis=-1).reshape(-1, 3)
    best = None
    best_r = None
    for mask in np.ndindex(2, 2, 2):
        c = np.clip(base + step * np.array(mask), 1, n - 2)
        t = g - c
        nodes = sgrid.origin + sgrid.spacing * (c[:, None, :] + cube[None, :, :])
        rmax = np.linalg.norm(nodes, axis=2).max(axis=1)
        # keep the stencil compact: never extrapolate beyond 1.5 cells
        rmax = np.where(np.abs(t).max(axis=1) > 1.5, np.inf, rmax)
        if best is None:
            best, best_r = c, rmax
        else:
            better = rmax < best_r - 1e-12
            best = np.where(better[:, None], c, best)
            best_r = np.where(better, rmax, best_r)
    return best


def interpolation_matrix(sgrid: SpatialGrid, points, derivative=None, inward=False):
    """Sparse map from active-node values to triquadratic interpolants at ``points``.

    ``derivative`` = axis index returns the matrix of that partial derivative.
    With ``inward`` the 27-node block is shifted towards the centre of the ball
    when that keeps more of it inside (used by the ghost closure, so ghost values
    depend on interior values only wherever possible).
    Every stencil node must be active; points within the closed ball always are.
    """
    p = np.atleast_2d(np.asarray(points, dtype=float))
    n, D = sgrid.nbox, sgrid.spacing
    g = (p - sgrid.origin) / D
    if inward:
        c = _inward_centers(sgrid, g, p)
    else:
        c = np.clip(np.rint(g).astype(np.int64), 1, n - 2)
    t = g - c
    w, dw = _lagrange3(t)
    if derivative is not None:
        w = w.copy()
        w[:, derivative, :] = dw[:, derivative, :] / D
    offs = np.array([-1, 0, 1])
    rows, cols, vals = [], [], []
    for a in range(3):
        for b in range(3):
            for k in range(3):
                idx = sgrid.lookup(c[:, 0] + offs[a], c[:, 1] + offs[b], c[:, 2] + offs[k])
                if np.any(idx < 0):
                    raise ValueError("interpolation stencil leaves the active node set")
                rows.append(np.arange(len(p)))
                cols.append(idx)
                vals.append(w[:, 0, a] * w[:, 1, b] * w[:, 2, k])
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(len(p), sgrid.size))


def _ghost_frames(sgrid: SpatialGrid):
    gi = np.nonzero(~sgrid.inside)[0]
    pos = sgrid.pos[gi]
    r = sgrid.radius[gi]
    n = pos / r[:, None]
    depth = r - 1.0
    D = sgrid.spacing
    I1 = interpolation_matrix(sgrid, n * (1 - D), inward=True)
    I2 = interpolation_matrix(sgrid, n * (1 - 2 * D), inward=True)
    return gi, n, depth, I1, I2


def _neumann_coeffs(d, D):
    # q(s) = c0 + c2 s^2 through s = D, 2D evaluated at s = -d
    c1 = 1 + (D * D - d * d) / (3 * D * D)
    c2 = -(D * D - d * d) / (3 * D * D)
    return c1, c2


def _dirichlet_coeffs(d, D):
    # q(s) = c1 s + c2 s^2 through s = D, 2D evaluated at s = -d
    # v1 = c1 D + c2 D^2, v2 = 2 c1 D + 4 c2 D^2
    # => c2 = (v2 - 2 v1)/(2 D^2), c1 = (4 v1 - v2)/(2 D)
    s = -d
    k1 = s * 4 / (2 * D) + s * s * (-2) / (2 * D * D)
    k2 = s * (-1) / (2 * D) + s * s / (2 * D * D)
    return k1, k2


def _laplacian_rows(sgrid: SpatialGrid):
    ii = np.nonzero(sgrid.inside)[0]
    n = sgrid.nbox
    box = sgrid.active_box[ii]
    I, J, K = box // (n * n), (box // n) % n, box % n
    rows, cols, vals = [np.arange(len(ii))], [ii], [np.full(len(ii), 6.0)]
    for di, dj, dk in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
        nb = sgrid.lookup(I + di, J + dj, K + dk)
        if np.any(nb < 0):
            raise ValueError("ghost band too thin for the Laplacian stencil")
        rows.append(np.arange(len(ii)))
        cols.append(nb)
        vals.append(np.full(len(ii), -1.0))
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(len(ii), sgrid.size)) / sgrid.spacing**2
    return ii, A


@dataclass
class EllipticSolution:
    values: np.ndarray
    residual: float
    h1_norm: float
    grid: SpatialGrid
    shift: float = 0.0

    def at(self, points):
        """Triquadratic interpolant at points in the closed ball."""
        M = interpolation_matrix(self.grid, points)
        return M @ self.values

    def gradient(self, points):
        pts = np.atleast_2d(points)
        cols = [interpolation_matrix(self.grid, pts, derivative=a) @ self.values for a in range(3)]
        return np.stack(cols, axis=1)

    def dump(self, fh, fmt="%.10e"):
        """Plain-text ``x y z value`` table over the nodes inside the ball."""
        m = self.grid.inside
        v = self.values[m]
        v = v.reshape(len(v), -1)
        np.savetxt(fh, np.column_stack([self.grid.pos[m], v]), fmt=fmt)


def _h1(sgrid: SpatialGrid, v):
    """Cell-volume-weighted value plus forward-difference gradient norm."""
    v = v.reshape(sgrid.size, -1)
    n = sgrid.nbox
    box = sgrid.active_box
    I, J, K = box // (n * n), (box // n) % n, box % n
    tot = sgrid.volume @ np.sum(v * v, axis=1)
    for di, dj, dk in ((1, 0, 0), (0, 1, 0), (0, 0, 1)):
        nb = sgrid.lookup(I + di, J + dj, K + dk)
        ok = (nb >= 0) & sgrid.inside
        dv = np.zeros_like(v)
        dv[ok] = (v[nb[ok]] - v[ok]) / sgrid.spacing
        tot += sgrid.volume @ np.sum(dv * dv, axis=1)
    return float(np.sqrt(tot))


def _source_values(sgrid, source, width):
    if callable(source):
        s = np.asarray(source(sgrid.pos), dtype=float)
    else:
        s = np.asarray(source, dtype=float)
    s = s.reshape(sgrid.size, width) if width > 1 else s.reshape(sgrid.size)
    return s


def _node_ordered(A, G, ii, gi):
    """Stack interior and ghost rows so that row k is the equation of unknown k."""
    R = sp.vstack([A, G]).tocsr()
    order = np.concatenate([ii, gi])
    inv = np.empty_like(order)
    inv[order] = np.arange(len(order))
    return R[inv]


def _gmres_amg(M, rhs, precond_matrix=None, tol=1e-12, restart=400, blocks=1):
    """GMRES with a Ruge-Stuben AMG V-cycle preconditioner.

    With ``blocks`` > 1 the preconditioner is block diagonal, one AMG
    hierarchy per diagonal block of equal size.
    """
    P = precond_matrix if precond_matrix is not None else M
    if blocks > 1:
        P = sp.csr_matrix(P)
        m = P.shape[0] // blocks
        parts = [pyamg.ruge_stuben_solver(P[a * m:(a + 1) * m, a * m:(a + 1) * m].tocsr(), max_coarse=300,
                                          interpolation="direct").aspreconditioner() for a in range(blocks)]
        cycle = spla.LinearOperator(P.shape, lambda v: np.concatenate(
            [parts[a] @ v[a * m:(a + 1) * m] for a in range(blocks)]))
    else:
        ml = pyamg.ruge_stuben_solver(sp.csr_matrix(P), max_coarse=300, interpolation="direct")
        cycle = ml.aspreconditioner()
    pre = cycle
    if P.shape != M.shape:
        # bordered system: AMG on the leading block, scaled identity on the border
        n = P.shape[0]
        tail = M.shape[0] - n
        diag = np.abs(M.diagonal()[n:]) if tail else np.array([])
        # the border row has a zero diagonal; use the row norm instead
        diag = np.where(diag > 0, diag, 1.0)

        def apply(v):
            out = np.empty_like(v)
            out[:n] = cycle @ v[:n]
            out[n:] = v[n:] / diag
            return out

        pre = spla.LinearOperator(M.shape, apply)
    x, info = spla.gmres(M, rhs, M=pre, rtol=tol, atol=0.0, restart=restart, maxiter=5)
    res = float(np.max(np.abs(M @ x - rhs)))
    if info != 0:
        raise RuntimeError(f"elliptic solve did not converge (max residual {res:.3e})")
    return x, res


def solve_poisson_neumann(source, sgrid: SpatialGrid, compat_tol=5e-2) -> EllipticSolution:
    """-Laplace Phi = source in the ball, dPhi/dn = 0 on the sphere, mean zero.

    ``source`` is an array over active nodes or a callable of positions.  The
    discrete problem is bordered with the mean-zero row and a constant shift
    of the interior equations; the shift absorbs the O(spacing^2) discrete
    incompatibility and is reported as ``shift``.
    """
    f = _source_values(sgrid, source, 1)
    scale = sgrid.volume @ np.abs(f)
    total = sgrid.volume @ f
    if scale > 0 and abs(total) > compat_tol * scale:
        raise ValueError(f"source integral {total:.3e} violates the Neumann compatibility condition")
    N = sgrid.size
    if scale == 0:
        return EllipticSolution(values=np.zeros(N), residual=0.0, h1_norm=0.0, grid=sgrid)
    ii, A = _laplacian_rows(sgrid)
    gi, nrm, depth, I1, I2 = _ghost_frames(sgrid)
    c1, c2 = _neumann_coeffs(depth, sgrid.spacing)
    G = sp.eye(N, format="csr")[gi] - sp.diags(c1) @ I1 - sp.diags(c2) @ I2
    An = _node_ordered(A, G, ii, gi)
    e = np.zeros(N)
    e[ii] = 1.0
    vol = sgrid.volume / sgrid.volume.sum()
    M = sp.bmat([[An, sp.csr_matrix(e[:, None])], [sp.csr_matrix(vol[None, :]), None]], format="csr")
    rhs = np.zeros(N + 1)
    rhs[ii] = f[ii]
    x, res = _gmres_amg(M, rhs, precond_matrix=An)
    phi = x[:N]
    return EllipticSolution(values=phi, residual=res, h1_norm=_h1(sgrid, phi), grid=sgrid, shift=float(x[N]))


def _tangent_frame(n):
    a = np.where(np.abs(n[:, :1]) < 0.9, np.array([[1.0, 0, 0]]), np.array([[0, 1.0, 0]]))
    t1 = a - np.sum(a * n, axis=1)[:, None] * n
    t1 /= np.linalg.norm(t1, axis=1)[:, None]
    t2 = np.cross(n, t1)
    return t1, t2


def solve_vector_poisson_tangential(source, sgrid: SpatialGrid) -> EllipticSolution:
    """-Laplace phi = source, phi.n = 0 and tangential part of d_n phi = 0 on the sphere.

    Along each ghost's normal line the normal component is extrapolated with
    the Dirichlet quadratic and the two tangential components with the
    Neumann quadratic, in the fixed frame (n, t1, t2) of that line.  The
    operator has a trivial kernel (rigid rotations violate the tangential
    Neumann condition), so no border is needed.  Unknowns are ordered
    component-major: index a * size + k.
    """
    f = _source_values(sgrid, source, 3)
    N = sgrid.size
    if not np.any(f[sgrid.inside]):
        return EllipticSolution(values=np.zeros((N, 3)), residual=0.0, h1_norm=0.0, grid=sgrid)
    ii, A = _laplacian_rows(sgrid)
    gi, nrm, depth, I1, I2 = _ghost_frames(sgrid)
    t1, t2 = _tangent_frame(nrm)
    nc1, nc2 = _neumann_coeffs(depth, sgrid.spacing)
    dc1, dc2 = _dirichlet_coeffs(depth, sgrid.spacing)
    frame = [nrm, t1, t2]
    ks = [(dc1, dc2), (nc1, nc2), (nc1, nc2)]
    Ig = sp.eye(N, format="csr")[gi]
    zero = sp.csr_matrix((len(ii), N))
    blocks = []
    # ghost value phi_g[a] = sum_e frame_e[a] q_e, q_e extrapolating frame_e . phi
    for a in range(3):
        row = []
        for b in range(3):
            k1 = sum(frame[e][:, a] * frame[e][:, b] * ks[e][0] for e in range(3))
            k2 = sum(frame[e][:, a] * frame[e][:, b] * ks[e][1] for e in range(3))
            G = -(sp.diags(k1) @ I1) - sp.diags(k2) @ I2
            if a == b:
                G = G + Ig
            row.append(_node_ordered(A if a == b else zero, G, ii, gi))
        blocks.append(row)
    M = sp.bmat(blocks, format="csr")
    rhs = np.zeros(3 * N)
    for a in range(3):
        rhs[a * N + ii] = f[ii, a]
    x, res = _gmres_amg(M, rhs, blocks=3)
    phi = x.reshape(3, N).T.copy()
    return EllipticSolution(values=phi, residual=res, h1_norm=_h1(sgrid, phi), grid=sgrid)


# ------------------------------------------------------------- test functions


class AnalyticPotential:
    """Potential given by closed-form value and gradient callables.

    For a scalar potential ``grad(y)`` returns (..., 3); for a vector potential
    it returns the Jacobian (..., 3, 3) with [i, j] = d_j phi^i.
    """

    def __init__(self, value, grad):
        self.value = value
        self.grad = grad


class GridPotential:
    """Potential backed by an EllipticSolution (gradients by triquadratic interpolation)."""

    def __init__(self, sol: EllipticSolution):
        self.sol = sol

    def value(self, y):
        return self.sol.at(np.reshape(y, (-1, 3)))

    def grad(self, y):
        y = np.asarray(y, dtype=float)
        g = self.sol.gradient(y.reshape(-1, 3))
        if g.ndim == 2:
            return g.reshape(y.shape)
        # (npts, 3 axes, 3 comps) -> [i, j] = d_j phi^i
        return np.swapaxes(g, 1, 2).reshape(y.shape[:-1] + (3, 3))


def test_function(kind, potential, params: SimParams, basis: InvariantBasis = BASIS):
    """psi_a, psi_b or psi_c as a callable psi(y, eta) broadcasting over leading axes.

    psi_a = sum_j d_j phi_a eta_j (|eta|^2 - 10) M^{1/2}
    psi_b = sum_ij d_j phi_b^i eta_i eta_j M^{1/2} - div phi_b (|eta|^2 - 1)/2 M^{1/2}
    psi_c = sum_j d_j phi_c eta_j (|eta|^2 - 5) M^{1/2}
    with M^{1/2} = mu^{1/2}(eta) mu_tilde^{1/2}(y).
    """
    h = params.h

    def Mh(y, eta):
        return np.sqrt(mu(eta) * mu_tilde(y, h))

    if kind in ("a", "c"):
        shift = 10.0 if kind == "a" else 5.0

        def psi(y, eta):
            y = np.asarray(y, dtype=float)
            eta = np.asarray(eta, dtype=float)
            g = potential.grad(y)
            r2 = np.sum(eta * eta, axis=-1)
            return np.sum(g * eta, axis=-1) * (r2 - shift) * Mh(y, eta)

        return psi
    if kind == "b":

        def psi(y, eta):
            y = np.asarray(y, dtype=float)
            eta = np.asarray(eta, dtype=float)
            J = potential.grad(y)
            quad = np.einsum("...ij,...i,...j->...", J, eta, eta)
            div = np.trace(J, axis1=-2, axis2=-1)
            r2 = np.sum(eta * eta, axis=-1)
            return (quad - div * (r2 - 1) / 2) * Mh(y, eta)

        return psi
    raise ValueError(f"unknown test-function kind {kind!r}")


def sphere_quadrature(n_theta=24, n_phi=48):
    """Gauss-Legendre in cos(theta) times uniform phi on the unit sphere."""
    x, w = np.polynomial.legendre.leggauss(n_theta)
    ph = 2 * np.pi * np.arange(n_phi) / n_phi
    st = np.sqrt(1 - x * x)
    pts = np.stack([np.outer(st, np.cos(ph)), np.outer(st, np.sin(ph)), np.outer(x, np.ones(n_phi))], axis=-1)
    wts = np.outer(w, np.full(n_phi, 2 * np.pi / n_phi))
    return pts.reshape(-1, 3), wts.ravel()


def _normal_aligned_velocities(n, m=20):
    """Gauss-Hermite velocity nodes in the frame (n, t1, t2), symmetric under eta_n -> -eta_n."""
    x, w = np.polynomial.hermite_e.hermegauss(m)
    w = w / np.sqrt(2 * np.pi)
    X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
    W = np.einsum("i,j,k->ijk", w, w, w).ravel()
    t1, t2 = _tangent_frame(n)
    c = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=-1)
    eta = (c[None, :, 0, None] * n[:, None, :] + c[None, :, 1, None] * t1[:, None, :]
           + c[None, :, 2, None] * t2[:, None, :])
    # weights integrate against the standard Gaussian; undo it
    gauss = np.exp(-0.5 * np.sum(c * c, axis=1)) * (2 * np.pi) ** -1.5
    return eta, W / gauss


def boundary_term(kind, potential, u, params: SimParams, n_theta=24, n_phi=48, n_vel=20):
    """int over the sphere x R^3 of (eta.n) psi u, i.e. int_gamma psi u d gamma.

    ``u(y, eta)`` is evaluated at boundary points.  The velocity quadrature is a
    Gauss-Hermite product aligned with the local normal, so the cancellation
    of odd-in-eta_n integrands is exact to rounding.
    """
    y, wy = sphere_quadrature(n_theta, n_phi)
    psi = test_function(kind, potential, params)
    eta, we = _normal_aligned_velocities(y, n_vel)
    Y = np.broadcast_to(y[:, None, :], eta.shape)
    en = np.sum(eta * y[:, None, :], axis=-1)
    vals = en * psi(Y, eta) * u(Y, eta)
    return float(wy @ (vals @ we))


def tangential_flux(potential, u, params: SimParams, n_theta=24, n_phi=48, n_vel=20):
    """-int_sphere phi . S_t dS, S = int eta_n^2 eta_t M^{1/2} u d eta.

    On the curved boundary the identity d_t(phi.n) = 0 gives (d_t phi).n =
    -phi.t, so the kind-b boundary term equals this flux instead of zero.
    """
    y, wy = sphere_quadrature(n_theta, n_phi)
    eta, we = _normal_aligned_velocities(y, n_vel)
    Y = np.broadcast_to(y[:, None, :], eta.shape)
    en = np.sum(eta * y[:, None, :], axis=-1)
    Mh = np.sqrt(mu(eta) * mu_tilde(Y, params.h))
    S = np.einsum("pv,pvk->pk", (en * en * Mh * u(Y, eta)) * we[None, :], eta)
    S_t = S - np.sum(S * y, axis=1)[:, None] * y
    phi = potential.value(y)
    return float(-wy @ np.sum(phi * S_t, axis=1))
