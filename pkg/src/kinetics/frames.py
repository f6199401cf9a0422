"""Expanding-ball and fixed-ball coordinates, reference Maxwellians and moments.

The lab frame carries a gas confined to the ball |x| <= R(t) with
R(t) = sqrt(1 + h^2 t^2).  The change of variables

    tau = arctan(h t) / h,   y = x / R,   eta = R xi - h^2 t x / R

maps it to the unit ball on the finite time interval [0, pi/(2h)).
All functions broadcast over leading batch dimensions; vectors live in the
last axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BOUNDARY_TOL = 1e-12
RHO_FLOOR = 1e-14


@dataclass(frozen=True)
class SimParams:
    h: float = 0.5
    beta: float = 2.0
    eta_max: float = 6.0
    seed: int = 20240521

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError(f"h must be > 0, got {self.h}")
        if not self.beta > 1.5:
            raise ValueError(f"beta must be > 3/2, got {self.beta}")
        if not self.eta_max > 0:
            raise ValueError(f"eta_max must be > 0, got {self.eta_max}")

    @property
    def tau_max(self) -> float:
        return 0.5 * np.pi / self.h


@dataclass(frozen=True)
class LabPoint:
    t: np.ndarray
    x: np.ndarray
    xi: np.ndarray


@dataclass(frozen=True)
class FixedPoint:
    tau: np.ndarray
    y: np.ndarray
    eta: np.ndarray


@dataclass(frozen=True)
class MacroState:
    rho: np.ndarray
    v: np.ndarray
    theta: np.ndarray
    degenerate: np.ndarray = field(default_factory=lambda: np.array(False))


def radius(t, h):
    """R(t) = sqrt(1 + h^2 t^2)."""
    t = np.asarray(t, dtype=float)
    return np.sqrt(1.0 + (h * t) ** 2)


def radius_rate(t, h):
    """R'(t) = h^2 t / R(t)."""
    t = np.asarray(t, dtype=float)
    return h * h * t / radius(t, h)


def _norm(v):
    return np.sqrt(np.sum(np.asarray(v, dtype=float) ** 2, axis=-1))


def to_fixed_frame(p: LabPoint, params: SimParams) -> FixedPoint:
    h = params.h
    t = np.asarray(p.t, dtype=float)
    x = np.asarray(p.x, dtype=float)
    xi = np.asarray(p.xi, dtype=float)
    if np.any(t < 0):
        raise ValueError("lab time must be nonnegative")
    R = radius(t, h)
    if np.any(_norm(x) > R * (1 + BOUNDARY_TOL)):
        raise ValueError("lab position outside the expanding ball |x| <= R(t)")
    Rb = R[..., None]
    tb = t[..., None]
    tau = np.arctan(h * t) / h
    y = x / Rb
    eta = Rb * xi - h * h * tb * x / Rb
    return FixedPoint(tau=tau, y=y, eta=eta)


def to_lab_frame(q: FixedPoint, params: SimParams) -> LabPoint:
    h = params.h
    tau = np.asarray(q.tau, dtype=float)
    y = np.asarray(q.y, dtype=float)
    eta = np.asarray(q.eta, dtype=float)
    if np.any(tau < 0) or np.any(tau >= params.tau_max):
        raise ValueError("tau must lie in [0, pi/(2h))")
    t = np.tan(h * tau) / h
    R = radius(t, h)
    Rb = R[..., None]
    x = Rb * y
    xi = (eta + h * h * t[..., None] * x / Rb) / Rb
    return LabPoint(t=t, x=x, xi=xi)


def mu(eta):
    """Standard Maxwellian (2 pi)^{-3/2} exp(-|eta|^2/2)."""
    eta = np.asarray(eta, dtype=float)
    return (2 * np.pi) ** -1.5 * np.exp(-0.5 * np.sum(eta * eta, axis=-1))


def mu_tilde(y, h):
    """Spatial Gaussian factor exp(-h^2 |y|^2 / 2) of the traveling Maxwellian."""
    y = np.asarray(y, dtype=float)
    return np.exp(-0.5 * h * h * np.sum(y * y, axis=-1))


def traveling_maxwellian(p: LabPoint, params: SimParams):
    h = params.h
    t = np.asarray(p.t, dtype=float)[..., None]
    x = np.asarray(p.x, dtype=float)
    xi = np.asarray(p.xi, dtype=float)
    r = x - t * xi
    expo = -0.5 * np.sum(xi * xi, axis=-1) - 0.5 * h * h * np.sum(r * r, axis=-1)
    return (2 * np.pi) ** -1.5 * np.exp(expo)


def moments(f_slice, grid) -> MacroState:
    """Density, bulk velocity and temperature of a velocity profile.

    ``grid`` is any object exposing ``nodes`` (n, 3) and ``weights`` (n,).
    The last axis of ``f_slice`` runs over the grid nodes.
    """
    f = np.asarray(f_slice, dtype=float)
    xi = grid.nodes
    w = grid.weights
    rho = f @ w
    mom = (f * w) @ xi
    degenerate = rho < RHO_FLOOR
    safe = np.where(degenerate, 1.0, rho)
    v = mom / safe[..., None]
    e2 = (f * w) @ np.sum(xi * xi, axis=-1)
    theta = 0.5 * (e2 / safe - np.sum(v * v, axis=-1))
    rho = np.where(degenerate, 0.0, rho)
    v = np.where(degenerate[..., None], 0.0, v)
    theta = np.where(degenerate, 0.0, theta)
    return MacroState(rho=rho, v=v, theta=theta, degenerate=degenerate)


def maxwellian_density(t, x, h):
    """Closed-form density of the traveling Maxwellian: R^-3 exp(-h^2|x|^2/(2R^2))."""
    R = radius(t, h)
    x = np.asarray(x, dtype=float)
    return R**-3 * np.exp(-0.5 * h * h * np.sum(x * x, axis=-1) / R**2)


def alpha(tau, params: SimParams):
    """alpha(tau) = int_0^tau cos^2(h s) ds."""
    h = params.h
    tau = np.asarray(tau, dtype=float)
    return 0.5 * tau + np.sin(2 * h * tau) / (4 * h)


def weight_phi(y, eta, params: SimParams):
    """phi_beta = (1 + |eta|^2 + h^2 |y|^2)^{beta/2}."""
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    s = 1.0 + np.sum(eta * eta, axis=-1) + params.h**2 * np.sum(y * y, axis=-1)
    return s ** (0.5 * params.beta)


def density_bounds_check(series, params: SimParams):
    """Infimum and supremum of rho(t, x) R(t)^3 over a sampled run.

    ``series`` is an iterable of (t, x, rho) with x a 3-vector.  Returns
    (c0, C0, ok) where ok means both bounds are finite and positive.
    """
    rows = list(series)
    if not rows:
        raise ValueError("density series is empty")
    t = np.array([r[0] for r in rows], dtype=float)
    rho = np.array([r[2] for r in rows], dtype=float)
    if np.any(~(rho > 0)):
        raise ValueError("density series contains nonpositive values")
    scaled = rho * radius(t, params.h) ** 3
    c0 = float(scaled.min())
    C0 = float(scaled.max())
    ok = bool(np.isfinite(c0) and np.isfinite(C0) and c0 > 0 and C0 > 0)
    return c0, C0, ok
