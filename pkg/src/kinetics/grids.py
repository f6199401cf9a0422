"""Velocity and spatial lattices shared by the collision, elliptic and transport code."""
from __future__ import annotations

import numpy as np

from .frames import mu

MAX_DENSE_NODES = 41**3


class VelocityGrid:
    """Uniform Cartesian lattice on [-eta_max, eta_max]^3 with trapezoid weights.

    Nodes are stored in C order of the (i, j, k) index triple, so node
    ``(i * n + j) * n + k`` sits at (v[i], v[j], v[k]).
    """

    def __init__(self, n: int = 15, eta_max: float = 6.0):
        if n < 3:
            raise ValueError("velocity grid needs at least 3 nodes per axis")
        self.n = int(n)
        self.eta_max = float(eta_max)
        self.axis = np.linspace(-eta_max, eta_max, self.n)
        self.spacing = self.axis[1] - self.axis[0]
        w1 = np.full(self.n, self.spacing)
        w1[0] = w1[-1] = 0.5 * self.spacing
        self.axis_weights = w1
        I, J, K = np.meshgrid(self.axis, self.axis, self.axis, indexing="ij")
        self.nodes = np.stack([I.ravel(), J.ravel(), K.ravel()], axis=-1)
        self.weights = np.einsum("i,j,k->ijk", w1, w1, w1).ravel()
        self.size = self.nodes.shape[0]
        self.speed = np.sqrt(np.sum(self.nodes**2, axis=1))
        self.sqrt_mu = np.sqrt(mu(self.nodes))

    def __eq__(self, other):
        return (
            isinstance(other, VelocityGrid)
            and self.n == other.n
            and self.eta_max == other.eta_max
        )

    def __hash__(self):
        return hash((self.n, self.eta_max))

    def __repr__(self):
        return f"VelocityGrid(n={self.n}, eta_max={self.eta_max})"

    def inner(self, f, g):
        """Quadrature inner product over the last axis."""
        return np.sum(np.asarray(f) * np.asarray(g) * self.weights, axis=-1)


def _cut_fraction(centers, spacing, sub=10):
    """Fraction of each cube cell that lies inside the unit ball (midpoint sampling)."""
    offs = (np.arange(sub) + 0.5) / sub - 0.5
    ox, oy, oz = np.meshgrid(offs, offs, offs, indexing="ij")
    o = np.stack([ox.ravel(), oy.ravel(), oz.ravel()], axis=-1) * spacing
    out = np.empty(len(centers))
    for start in range(0, len(centers), 512):
        c = centers[start:start + 512]
        pts = c[:, None, :] + o[None, :, :]
        out[start:start + 512] = np.mean(np.sum(pts * pts, axis=-1) <= 1.0, axis=1)
    return out


class SpatialGrid:
    """Cartesian lattice restricted to the unit ball plus a ghost band.

    ``n`` nodes per axis span [-1, 1]; the box is padded by ``ceil(band)``
    nodes on each side (``nbox`` per axis, first node at ``origin``).
    ``active`` nodes are those inside the closed ball together with the
    exterior nodes within ``band`` spacings of the sphere.  Arrays named
    ``pos``, ``inside``, ``volume`` are indexed by active node.
    """

    def __init__(self, n: int = 17, band: float = 3.0):
        if n < 3 or n % 2 == 0:
            raise ValueError("spatial grid needs an odd node count >= 3 per axis")
        self.n = int(n)
        self.band = float(band)
        self.spacing = 2.0 / (self.n - 1)
        pad = int(np.ceil(self.band))
        self.nbox = self.n + 2 * pad
        self.origin = -1.0 - pad * self.spacing
        self.axis = self.origin + self.spacing * np.arange(self.nbox)
        mid = (self.nbox - 1) // 2
        self.axis[mid] = 0.0
        I, J, K = np.meshgrid(self.axis, self.axis, self.axis, indexing="ij")
        box = np.stack([I.ravel(), J.ravel(), K.ravel()], axis=-1)
        r = np.sqrt(np.sum(box**2, axis=1))
        inside = r <= 1.0 + 1e-12
        ghost = (~inside) & (r <= 1.0 + self.band * self.spacing)
        active = inside | ghost
        self.box_index = np.full(box.shape[0], -1, dtype=np.int64)
        self.box_index[active] = np.arange(active.sum())
        self.active_box = np.nonzero(active)[0]
        self.pos = box[active]
        self.radius = r[active]
        self.inside = inside[active]
        self.ghost = ghost[active]
        self.size = self.pos.shape[0]
        self.n_inside = int(self.inside.sum())
        vol = np.zeros(self.size)
        full = self.radius + 0.5 * np.sqrt(3) * self.spacing <= 1.0
        vol[full] = 1.0
        cut = (~full) & (self.radius - 0.5 * np.sqrt(3) * self.spacing < 1.0)
        vol[cut] = _cut_fraction(self.pos[cut], self.spacing)
        self.volume = vol * self.spacing**3
        self.ball_volume = 4.0 * np.pi / 3.0

    def __repr__(self):
        return f"SpatialGrid(n={self.n}, inside={self.n_inside}, active={self.size})"

    def lookup(self, i, j, k):
        """Active index of box triple (i, j, k), or -1 when outside the active set."""
        i = np.asarray(i)
        j = np.asarray(j)
        k = np.asarray(k)
        m = self.nbox
        ok = (i >= 0) & (i < m) & (j >= 0) & (j < m) & (k >= 0) & (k < m)
        flat = (np.clip(i, 0, m - 1) * m + np.clip(j, 0, m - 1)) * m + np.clip(k, 0, m - 1)
        return np.where(ok, self.box_index[flat], -1)

    def integrate(self, values):
        """Cut-cell quadrature over the ball of a field indexed by active node."""
        return np.tensordot(self.volume, np.asarray(values), axes=(0, 0))
