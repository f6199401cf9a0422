"""Exact characteristics of d/dtau + eta.grad_y - h^2 y.grad_eta in the unit ball.

Between wall contacts the flow is a planar harmonic ellipse; the wall
contact time has a closed form in terms of the two orbit invariants

    e = |eta|^2 + h^2 |y|^2,      m = |eta x y|^2.

Everything here runs in backward time: a path starts at (tau0, y0, eta0)
and is followed towards tau = 0, reflecting specularly at |y| = 1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

BOUNDARY_TOL = 1e-12
GRAZING_TOL = 1e-12
MAX_BOUNCES_CAP = 10**6

CROSSING = "crossing"
GRAZING = "grazing"
INTERIOR = "interior"

GAMMA_PLUS = "gamma_plus"
GAMMA_MINUS = "gamma_minus"
GAMMA_00 = "gamma_00"
GAMMA_01 = "gamma_01"

SPECULAR = 0
REVERSE = 1


@dataclass(frozen=True)
class TrajectoryInvariants:
    e: np.ndarray
    m: np.ndarray
    l_max: np.ndarray
    l_min: np.ndarray


@dataclass(frozen=True)
class ASetParams:
    kappa: float = 0.1
    N: float = 2.0

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("kappa must be > 0")
        if not self.N >= 1:
            raise ValueError("N must be >= 1")

    def delta(self, h):
        return h * h * self.kappa / self.N**2

    def count_bound(self, h):
        return np.pi * self.N**2 / (h * self.kappa)

    def max_bounces(self, h):
        return int(min(4 * np.ceil(self.count_bound(h)), MAX_BOUNCES_CAP))

    def contains(self, y, eta, h):
        y = np.asarray(y, dtype=float)
        eta = np.asarray(eta, dtype=float)
        speed = np.sqrt(np.sum(eta * eta, axis=-1))
        return (
            (grazing_margin(y, eta, h) >= self.kappa**2)
            & (speed >= 2 * h)
            & (speed <= 2 * self.N)
        )


def _dot(a, b):
    return np.sum(a * b, axis=-1)


def advance_free(y0, eta0, tau0, tau, h):
    """Whole-space harmonic flow from (tau0, y0, eta0) to time tau."""
    y0 = np.asarray(y0, dtype=float)
    eta0 = np.asarray(eta0, dtype=float)
    d = np.asarray(tau, dtype=float) - np.asarray(tau0, dtype=float)
    c = np.cos(h * d)[..., None]
    s = np.sin(h * d)[..., None]
    Y = y0 * c + eta0 * (s / h)
    H = -h * y0 * s + eta0 * c
    return Y, H


def invariants(y, eta, h) -> TrajectoryInvariants:
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    e = _dot(eta, eta) + h * h * _dot(y, y)
    cr = np.cross(eta, y)
    m = _dot(cr, cr)
    disc = np.sqrt(np.maximum(e * e - 4 * h * h * m, 0.0))
    l_max = np.sqrt((e + disc) / (2 * h * h))
    l_min = np.sqrt(np.maximum(e - disc, 0.0) / (2 * h * h))
    return TrajectoryInvariants(e=e, m=m, l_max=l_max, l_min=l_min)


def grazing_margin(y, eta, h):
    """e - m - h^2, written in the cancellation-free form (|eta|^2-h^2)(1-|y|^2) + (y.eta)^2."""
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    yn = _dot(y, eta)
    return (_dot(eta, eta) - h * h) * (1.0 - _dot(y, y)) + yn * yn


def classify_trajectory(y, eta, h):
    g = np.asarray(grazing_margin(y, eta, h))
    out = np.where(g > GRAZING_TOL, CROSSING, np.where(g < -GRAZING_TOL, INTERIOR, GRAZING))
    return out.item() if out.ndim == 0 else out


def chord_gap(e, m, h):
    """Time between two successive wall contacts, (1/h) arccos((e - 2h^2)/sqrt(e^2 - 4h^2 m))."""
    g = np.maximum(np.asarray(e) - np.asarray(m) - h * h, 0.0)
    return np.arctan2(2 * h * np.sqrt(g), np.asarray(e) - 2 * h * h) / h


def _exit_time(y, eta, h):
    """Backward time to the wall for crossing orbits; inf otherwise.

    With D = e^2 - 4h^2 m, |Y|^2 = (e - sqrt(D) cos(psi)) / (2h^2) where the
    phase psi starts at theta = atan2(2h y.eta, |eta|^2 - h^2|y|^2) and
    decreases at rate 2h in backward time.  The wall is reached when psi
    hits -A with A = arccos((e - 2h^2)/sqrt(D)), hence tau_b = (theta + A)/(2h).
    """
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    yy = _dot(y, y)
    ee = _dot(eta, eta)
    yn = _dot(y, eta)
    g = (ee - h * h) * (1.0 - yy) + yn * yn
    e = ee + h * h * yy
    with np.errstate(invalid="ignore"):
        A = np.arctan2(2 * h * np.sqrt(np.maximum(g, 0.0)), e - 2 * h * h)
        theta = np.arctan2(2 * h * yn, ee - h * h * yy)
    tb = np.clip((theta + A) / (2 * h), 0.0, A / h)
    return np.where(g > GRAZING_TOL, tb, np.inf)


def backward_exit(y0, eta0, tau0, h):
    """Closed-form backward exit (tau_b, y_b, eta_b) of a crossing orbit."""
    y0 = np.asarray(y0, dtype=float)
    eta0 = np.asarray(eta0, dtype=float)
    if np.any(np.sqrt(_dot(y0, y0)) > 1 + BOUNDARY_TOL):
        raise ValueError("starting point outside the unit ball")
    tb = _exit_time(y0, eta0, h)
    if np.any(~np.isfinite(tb)):
        raise ValueError("backward_exit requires a crossing orbit (e - m > h^2)")
    yb, eb = advance_free(y0, eta0, tau0, np.asarray(tau0) - tb, h)
    yb = yb / np.sqrt(_dot(yb, yb))[..., None]
    return tb, yb, eb


def exit_time_gradient(y0, eta0, h):
    """Gradient of tau_b with respect to (y0, eta0).

    Implicit differentiation of |Y(tau0 - tau_b)|^2 = 1 gives
    grad_y0 = cos(h tau_b) y_b / (y_b.eta_b),
    grad_eta0 = -sin(h tau_b) y_b / (h y_b.eta_b).
    """
    tb, yb, eb = backward_exit(y0, eta0, 0.0, h)
    den = _dot(yb, eb)[..., None]
    gy = np.cos(h * tb)[..., None] * yb / den
    ge = -np.sin(h * tb)[..., None] * yb / (h * den)
    return gy, ge


def reflect_specular(y, eta):
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if np.any(np.abs(np.sqrt(_dot(y, y)) - 1.0) > 1e-10):
        raise ValueError("specular reflection needs a boundary point |y| = 1")
    return eta - 2.0 * _dot(eta, y)[..., None] * y


# ---------------------------------------------------------------- numba core


@nb.njit(cache=True)
def _exit_time_1(y0, y1, y2, e0, e1, e2, h):
    yy = y0 * y0 + y1 * y1 + y2 * y2
    ee = e0 * e0 + e1 * e1 + e2 * e2
    yn = y0 * e0 + y1 * e1 + y2 * e2
    g = (ee - h * h) * (1.0 - yy) + yn * yn
    if g <= GRAZING_TOL:
        return np.inf
    e = ee + h * h * yy
    A = np.arctan2(2.0 * h * np.sqrt(g), e - 2.0 * h * h)
    theta = np.arctan2(2.0 * h * yn, ee - h * h * yy)
    tb = (theta + A) / (2.0 * h)
    if tb < 0.0:
        tb = 0.0
    if tb > A / h:
        tb = A / h
    return tb


@nb.njit(cache=True)
def _flow_back_1(y, eta, s, h, rule, max_bounces, out_y, out_eta):
    """Follow one point backward for duration s. Returns the bounce count or -1."""
    y0, y1, y2 = y[0], y[1], y[2]
    e0, e1, e2 = eta[0], eta[1], eta[2]
    left = s
    nbounce = 0
    while True:
        tb = _exit_time_1(y0, y1, y2, e0, e1, e2, h)
        step = left if tb >= left else tb
        c = np.cos(h * step)
        sn = np.sin(h * step)
        ny0 = y0 * c - e0 * sn / h
        ny1 = y1 * c - e1 * sn / h
        ny2 = y2 * c - e2 * sn / h
        ne0 = h * y0 * sn + e0 * c
        ne1 = h * y1 * sn + e1 * c
        ne2 = h * y2 * sn + e2 * c
        y0, y1, y2, e0, e1, e2 = ny0, ny1, ny2, ne0, ne1, ne2
        if tb >= left:
            break
        left -= tb
        r = np.sqrt(y0 * y0 + y1 * y1 + y2 * y2)
        y0 /= r
        y1 /= r
        y2 /= r
        if rule == 0:
            d = 2.0 * (e0 * y0 + e1 * y1 + e2 * y2)
            e0 -= d * y0
            e1 -= d * y1
            e2 -= d * y2
        else:
            e0, e1, e2 = -e0, -e1, -e2
        nbounce += 1
        if nbounce > max_bounces:
            return -1
    out_y[0], out_y[1], out_y[2] = y0, y1, y2
    out_eta[0], out_eta[1], out_eta[2] = e0, e1, e2
    return nbounce


@nb.njit(cache=True)
def _flow_back_batch(Y, E, S, h, rule, max_bounces, out_y, out_eta, counts):
    for i in range(Y.shape[0]):
        counts[i] = _flow_back_1(Y[i], E[i], S[i], h, rule, max_bounces, out_y[i], out_eta[i])


def flow_back(y, eta, s, h, rule=SPECULAR, max_bounces=MAX_BOUNCES_CAP):
    """State reached from (y, eta) after backward duration s, reflecting at the wall.

    Vectorized over a batch of points; ``s`` broadcasts against the batch.
    Returns (y, eta, bounce_count).
    """
    y = np.ascontiguousarray(np.asarray(y, dtype=float).reshape(-1, 3))
    eta = np.ascontiguousarray(np.asarray(eta, dtype=float).reshape(-1, 3))
    s = np.ascontiguousarray(np.broadcast_to(np.asarray(s, dtype=float), (y.shape[0],)))
    oy = np.empty_like(y)
    oe = np.empty_like(eta)
    cnt = np.empty(y.shape[0], dtype=np.int64)
    _flow_back_batch(y, eta, s, float(h), int(rule), int(max_bounces), oy, oe, cnt)
    if np.any(cnt < 0):
        raise RuntimeError("bounce limit exceeded while tracing backward characteristics")
    return oy, oe, cnt


@nb.njit(cache=True)
def _trace_events(tau0, y, eta, h, rule, max_bounces, taus, ys, e_in, e_out):
    """Record wall contacts of one backward path down to tau = 0."""
    y0, y1, y2 = y[0], y[1], y[2]
    e0, e1, e2 = eta[0], eta[1], eta[2]
    t = tau0
    k = 0
    while True:
        tb = _exit_time_1(y0, y1, y2, e0, e1, e2, h)
        if tb >= t:
            return k
        if k >= max_bounces:
            return -1
        c = np.cos(h * tb)
        sn = np.sin(h * tb)
        ny0 = y0 * c - e0 * sn / h
        ny1 = y1 * c - e1 * sn / h
        ny2 = y2 * c - e2 * sn / h
        ne0 = h * y0 * sn + e0 * c
        ne1 = h * y1 * sn + e1 * c
        ne2 = h * y2 * sn + e2 * c
        r = np.sqrt(ny0 * ny0 + ny1 * ny1 + ny2 * ny2)
        y0, y1, y2 = ny0 / r, ny1 / r, ny2 / r
        t -= tb
        taus[k] = t
        ys[k, 0], ys[k, 1], ys[k, 2] = y0, y1, y2
        e_in[k, 0], e_in[k, 1], e_in[k, 2] = ne0, ne1, ne2
        if rule == 0:
            d = 2.0 * (ne0 * y0 + ne1 * y1 + ne2 * y2)
            e0, e1, e2 = ne0 - d * y0, ne1 - d * y1, ne2 - d * y2
        else:
            e0, e1, e2 = -ne0, -ne1, -ne2
        e_out[k, 0], e_out[k, 1], e_out[k, 2] = e0, e1, e2
        k += 1


# ------------------------------------------------------------- backward paths


@dataclass(frozen=True)
class BackwardPath:
    """Backward characteristic from (tau0, y0, eta0) down to tau = 0.

    ``taus[k]``, ``ys[k]`` are the wall contacts (k = 1.. in the usual
    numbering, stored from index 0), ``eta_in`` the velocity arriving at the
    wall in backward time and ``eta_out`` the reflected velocity carried by
    the next (earlier) segment.
    """

    tau0: float
    y0: np.ndarray
    eta0: np.ndarray
    h: float
    kind: str
    taus: np.ndarray
    ys: np.ndarray
    eta_in: np.ndarray
    eta_out: np.ndarray
    terminal: float = 0.0

    @property
    def n_bounces(self) -> int:
        return len(self.taus)

    def segment_starts(self):
        """Start time, position and velocity of every segment, latest first."""
        t = np.concatenate([[self.tau0], self.taus])
        y = np.vstack([self.y0[None, :], self.ys])
        e = np.vstack([self.eta0[None, :], self.eta_out])
        return t, y, e

    def at(self, tau):
        """Position and velocity on the path at time(s) tau in [0, tau0]."""
        tau = np.asarray(tau, dtype=float)
        t, y, e = self.segment_starts()
        # segment k covers [t[k+1], t[k]]; times are decreasing
        k = np.searchsorted(-t, -tau, side="left") - 1
        k = np.clip(k, 0, len(t) - 1)
        return advance_free(y[k], e[k], t[k], tau, self.h)

    def dump(self, fh):
        for t, y, e in zip(self.taus, self.ys, self.eta_out):
            fh.write(" ".join(f"{v:.17g}" for v in (t, *y, *e)) + "\n")


def backward_path(tau0, y0, eta0, h, max_bounces=None, rule=SPECULAR) -> BackwardPath:
    y0 = np.asarray(y0, dtype=float).reshape(3)
    eta0 = np.asarray(eta0, dtype=float).reshape(3)
    if np.linalg.norm(y0) > 1 + BOUNDARY_TOL:
        raise ValueError("path origin outside the unit ball")
    if not (0 <= tau0 < 0.5 * np.pi / h + 1e-12):
        raise ValueError("tau0 must lie in [0, pi/(2h))")
    if max_bounces is None:
        max_bounces = MAX_BOUNCES_CAP
    max_bounces = int(min(max_bounces, MAX_BOUNCES_CAP))
    kind = classify_trajectory(y0, eta0, h)
    cap = max_bounces + 1
    taus = np.empty(cap)
    ys = np.empty((cap, 3))
    e_in = np.empty((cap, 3))
    e_out = np.empty((cap, 3))
    k = _trace_events(float(tau0), y0, eta0, float(h), int(rule), max_bounces, taus, ys, e_in, e_out)
    if k < 0:
        raise RuntimeError(f"more than {max_bounces} wall contacts on the backward path")
    return BackwardPath(
        tau0=float(tau0), y0=y0, eta0=eta0, h=float(h), kind=str(kind),
        taus=taus[:k].copy(), ys=ys[:k].copy(), eta_in=e_in[:k].copy(), eta_out=e_out[:k].copy(),
    )


def classify_boundary(y, eta, h, tol=1e-12):
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if abs(np.linalg.norm(y) - 1.0) > 1e-10:
        raise ValueError("classify_boundary needs |y| = 1")
    s = float(np.dot(y, eta))
    if s > tol:
        return GAMMA_PLUS
    if s < -tol:
        return GAMMA_MINUS
    return GAMMA_00 if np.linalg.norm(eta) < h else GAMMA_01


# -------------------------------------------------------- velocity lemma audit


def sample_aset(n, h, aset: ASetParams, rng):
    """Uniform-in-ball positions and shell velocities, rejection-filtered to the A-set."""
    ys, es = [], []
    have = 0
    while have < n:
        m = 2 * (n - have) + 16
        d = rng.normal(size=(m, 3))
        y = d / np.linalg.norm(d, axis=1)[:, None] * rng.uniform(size=(m, 1)) ** (1 / 3)
        v = rng.normal(size=(m, 3))
        v /= np.linalg.norm(v, axis=1)[:, None]
        eta = v * rng.uniform(2 * h, 2 * aset.N, size=(m, 1))
        ok = aset.contains(y, eta, h)
        ys.append(y[ok])
        es.append(eta[ok])
        have += int(ok.sum())
    return np.vstack(ys)[:n], np.vstack(es)[:n]


def velocity_lemma_report(tau0, y0, eta0, h, aset: ASetParams, rng, n_eta=100, gap_tol=1e-10):
    """Check the four bounce-spacing clauses on one A-set backward path.

    Returns a dict with the measured quantities and a pass flag per clause;
    ``failed`` lists the clauses that did not hold.
    """
    y0 = np.asarray(y0, dtype=float)
    eta0 = np.asarray(eta0, dtype=float)
    if not aset.contains(y0, eta0, h):
        raise ValueError("starting point is not in the A-set")
    inv = invariants(y0, eta0, h)
    gap = float(chord_gap(inv.e, inv.m, h))
    kappa, N = aset.kappa, aset.N
    delta = aset.delta(h)
    clause_a = kappa / (2 * N**2) <= gap <= np.pi / (2 * h)

    path = backward_path(tau0, y0, eta0, h, max_bounces=aset.max_bounces(h))
    count = path.n_bounces
    clause_b = count <= aset.count_bound(h)
    gaps = -np.diff(path.taus)
    gaps_ok = bool(np.all(np.abs(gaps - gap) <= gap_tol))
    t, ys, es = path.segment_starts()
    inv_ok = True
    if count:
        iv = invariants(ys, es, h)
        inv_ok = bool(np.all(np.abs(iv.e - inv.e) <= 1e-10) and np.all(np.abs(iv.m - inv.m) <= 1e-10))

    # window clause: e' - m' >= h^2 + h^4 kappa^2 / N^2 away from contacts
    target = h * h + h**4 * kappa**2 / N**2
    # the window below the last contact ends at the (virtual) next contact before 0
    t_last, y_last, e_last = (a[-1] for a in path.segment_starts())
    virtual = t_last - float(_exit_time(y_last, e_last, h))
    bounds = np.concatenate([[tau0], path.taus, [virtual]])
    samples = []
    for k in range(1, len(bounds)):
        lo = max(bounds[k] + delta, 0.0)
        hi = bounds[k - 1] - delta
        if hi <= lo:
            continue
        samples.extend([lo, 0.5 * (lo + hi), hi])
    margin_min = np.inf
    if samples:
        ts = np.asarray(samples)
        yt, _ = path.at(ts)
        v = rng.normal(size=(len(ts), n_eta, 3))
        v /= np.linalg.norm(v, axis=-1)[..., None]
        v *= rng.uniform(2 * h, 2 * N, size=(len(ts), n_eta, 1))
        yb = np.broadcast_to(yt[:, None, :], v.shape)
        em = grazing_margin(yb, v, h) + h * h
        # the smallest margin over the shell is attained by |eta'| = 2h orthogonal to y
        worst = 3 * h * h * (1 - np.sum(yt * yt, axis=-1)) + h * h
        margin_min = float(min(em.min(), worst.min()))
    clause_c = margin_min >= target

    lo = np.clip(path.taus - delta, 0.0, tau0)
    hi = np.clip(path.taus + delta, 0.0, tau0)
    excluded = _union_length(lo, hi)
    clause_d = excluded <= 2 * np.pi * h

    clauses = {"a": bool(clause_a), "b": bool(clause_b), "c": bool(clause_c), "d": bool(clause_d)}
    return {
        "gap": gap,
        "count": count,
        "count_bound": aset.count_bound(h),
        "gaps_equal": gaps_ok,
        "invariants_equal": inv_ok,
        "margin_min": margin_min,
        "margin_target": target,
        "excluded": excluded,
        "clauses": clauses,
        "failed": [k for k, v in clauses.items() if not v],
    }


def _union_length(lo, hi):
    if len(lo) == 0:
        return 0.0
    order = np.argsort(lo)
    lo, hi = lo[order], hi[order]
    total = 0.0
    cur_lo, cur_hi = lo[0], hi[0]
    for a, b in zip(lo[1:], hi[1:]):
        if a > cur_hi:
            total += cur_hi - cur_lo
            cur_lo, cur_hi = a, b
        else:
            cur_hi = max(cur_hi, b)
    return float(total + cur_hi - cur_lo)


# ---------------------------------------------------------- continuity probes


def path_distance(path_a: BackwardPath, path_b: BackwardPath, n_samples=4001):
    """sup over matched times of |y_a(tau) - y_b(tau)| on the common interval."""
    t_end = min(path_a.tau0, path_b.tau0)
    ts = np.concatenate([np.linspace(0.0, t_end, n_samples), path_a.taus, path_b.taus])
    ts = ts[(ts >= 0) & (ts <= t_end)]
    ya, _ = path_a.at(ts)
    yb, _ = path_b.at(ts)
    return float(np.max(np.linalg.norm(ya - yb, axis=-1)))


def _perturbations(y0, eta0, eps, directions):
    out = []
    for d in directions:
        y = y0 + eps * d[:3]
        r = np.linalg.norm(y)
        if r > 1.0:
            y = y / r
        out.append((y, eta0 + eps * d[3:]))
    return out


def default_directions(seed=0, n_random=6):
    """Axis-aligned scalings of the velocity plus a few random 6-D unit directions."""
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n_random, 6))
    d /= np.linalg.norm(d, axis=1)[:, None]
    return d


def continuity_probe(tau0, y0, eta0, h, eps_list, directions=None, rule=SPECULAR,
                     max_bounces=20000, extra=None):
    """Lipschitz ratios sup_tau |y_c - y_p| / eps of backward paths under perturbation.

    The center path is compared with paths started from perturbed points.
    ``directions`` are 6-vectors (dy, deta); ``extra`` is a list of callables
    eps -> (y, eta) giving additional hand-built perturbations.
    Returns a dict eps -> max ratio.
    """
    y0 = np.asarray(y0, dtype=float)
    eta0 = np.asarray(eta0, dtype=float)
    if directions is None:
        directions = default_directions()
    center = backward_path(tau0, y0, eta0, h, max_bounces=max_bounces, rule=rule)
    ratios = {}
    for eps in eps_list:
        pts = _perturbations(y0, eta0, eps, directions)
        if extra:
            pts += [f(eps) for f in extra]
        worst = 0.0
        for y, e in pts:
            p = backward_path(tau0, y, e, h, max_bounces=max_bounces, rule=rule)
            worst = max(worst, path_distance(center, p) / eps)
        ratios[eps] = worst
    return ratios


def grazing_center(h, r_apse=0.6, phase=0.5):
    """A point on an orbit that touches the wall from inside.

    The ellipse Y(p) = r_apse cos(p) e1 + sin(p) e2 has semi-axes r_apse and 1
    and so grazes the sphere at p = pi/2.  The returned point sits at
    p = pi/2 + phase, so the contact is reached after backward time phase/h.
    """
    p = 0.5 * np.pi + phase
    y = np.array([r_apse * np.cos(p), np.sin(p), 0.0])
    eta = h * np.array([-r_apse * np.sin(p), np.cos(p), 0.0])
    return y, eta


def reverse_reflection_probe(tau0, y0, eta0, h, eps_list, max_bounces=20000):
    """Distances between paths of a straddling pair under reverse reflection eta' = -eta.

    The pair is the center with its velocity scaled by (1 + eps) (crossing,
    reaches the wall) and by (1 - eps) (stays inside).  Returns a dict
    eps -> (distance, bounces_plus, bounces_minus).
    """
    y0 = np.asarray(y0, dtype=float)
    eta0 = np.asarray(eta0, dtype=float)
    out = {}
    for eps in eps_list:
        pa = backward_path(tau0, y0, eta0 * (1 + eps), h, max_bounces=max_bounces, rule=REVERSE)
        pb = backward_path(tau0, y0, eta0 * (1 - eps), h, max_bounces=max_bounces, rule=REVERSE)
        out[eps] = (path_distance(pa, pb), pa.n_bounces, pb.n_bounces)
    return out


def pair_distances(tau0, ya, ea, yb, eb, h, rule=SPECULAR, max_bounces=20000):
    pa = backward_path(tau0, ya, ea, h, max_bounces=max_bounces, rule=rule)
    pb = backward_path(tau0, yb, eb, h, max_bounces=max_bounces, rule=rule)
    return path_distance(pa, pb), pa.n_bounces, pb.n_bounces


# ----------------------------------------------------------------- Jacobian


def double_backtrack_jacobian(tau, y, eta, tau1, tau2, eta_prime, h, step=1e-4):
    """Finite-difference |det d y2 / d eta'| for the two-stage backtrack.

    y1 is the position at tau1 on the backward path of (tau, y, eta); y2 the
    position at tau2 on the backward path of (tau1, y1, eta').  Returns the
    measured determinant and the closed form |sin(h(tau2 - tau1))/h|^3.
    """
    path = backward_path(tau, y, eta, h)
    y1, _ = path.at(np.array([tau1]))
    y1 = y1[0]
    if np.linalg.norm(y1) > 1:
        y1 = y1 / np.linalg.norm(y1)
    eta_prime = np.asarray(eta_prime, dtype=float)
    duration = tau1 - tau2

    def y2(ep):
        yy, _, cnt = flow_back(y1, ep, duration, h)
        if cnt[0] != 0:
            raise ValueError("second backtrack hits the wall between tau2 and tau1")
        return yy[0]

    y2(eta_prime)
    J = np.empty((3, 3))
    for j in range(3):
        d = np.zeros(3)
        d[j] = step
        J[:, j] = (y2(eta_prime + d) - y2(eta_prime - d)) / (2 * step)
    closed = abs(np.sin(h * (tau2 - tau1)) / h) ** 3
    return abs(np.linalg.det(J)), closed
