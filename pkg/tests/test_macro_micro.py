import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kinetics import macro_micro as mm
from kinetics.collision import BASIS
from kinetics.frames import SimParams, mu, mu_tilde
from kinetics.grids import SpatialGrid, VelocityGrid


@pytest.fixture(scope="module")
def grids():
    return SpatialGrid(7), VelocityGrid(9, 4.0)


@pytest.fixture(scope="module")
def fine_v():
    return VelocityGrid(33, 8.0)


def _scaled(u_of_eta, sg, vg, params):
    """u(y, eta) = g(eta) mu_tilde(y)^{-1/2}."""
    inv = 1.0 / np.sqrt(mu_tilde(sg.pos, params.h))
    return inv[:, None] * u_of_eta(vg.nodes)[None, :]


def test_round_trip_random(grids, rng):
    sg, vg = grids
    p = SimParams(h=0.5)
    u = rng.standard_normal((sg.size, vg.size))
    m = mm.decompose(u, vg, sg, p)
    back = mm.reconstruct(m, vg, sg, p)
    assert np.max(np.abs(back - u)) <= 1e-10 * np.max(np.abs(u))


@settings(max_examples=20, deadline=None)
@given(h=st.floats(0.01, 1.0), seed=st.integers(0, 2**31))
def test_round_trip_property(grids, h, seed):
    sg, vg = grids
    p = SimParams(h=h)
    u = np.random.default_rng(seed).standard_normal((sg.size, vg.size))
    back = mm.reconstruct(mm.decompose(u, vg, sg, p), vg, sg, p)
    assert np.allclose(back, u, rtol=0, atol=1e-10)


def test_decompose_pure_density(grids, fine_v):
    sg, _ = grids
    vg = fine_v
    p = SimParams(h=0.5)
    u = _scaled(lambda e: BASIS.chi(0, e), sg, vg, p)
    m = mm.decompose(u, vg, sg, p)
    assert np.allclose(m.a, 1.0, atol=1e-10)
    assert np.max(np.abs(m.b)) <= 1e-10
    # c - q is the chi_4 coefficient, which vanishes here
    assert np.allclose(m.c - m.q, 0.0, atol=1e-10)
    assert np.allclose(m.q, p.h**2 * np.sum(sg.pos**2, axis=1) / np.sqrt(6), atol=1e-12)
    assert np.max(np.abs(m.d)) <= 1e-10


def test_decompose_burnette_is_microscopic(grids, fine_v):
    sg, _ = grids
    vg = fine_v
    p = SimParams(h=0.5)
    u = _scaled(lambda e: BASIS.A(1, e), sg, vg, p)
    m = mm.decompose(u, vg, sg, p)
    for arr in (m.a, m.b, m.c, m.q):
        assert np.max(np.abs(arr)) <= 1e-10
    mt = np.sqrt(mu_tilde(sg.pos, p.h))[:, None]
    assert np.allclose(m.d, u * mt, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(h=st.floats(0.01, 1.0), seed=st.integers(0, 2**31))
def test_q_bound(grids, h, seed):
    sg, vg = grids
    p = SimParams(h=h)
    u = np.random.default_rng(seed).standard_normal((sg.size, vg.size))
    m = mm.decompose(u, vg, sg, p)
    inside = sg.inside
    lhs = np.sum(sg.volume[inside] * m.q[inside] ** 2)
    rhs = h**4 / 6 * np.sum(sg.volume[inside] * m.a[inside] ** 2)
    assert lhs <= rhs * (1 + 1e-12) + 1e-300


def test_conservation_functionals_of_density(grids, fine_v):
    sg, _ = grids
    vg = fine_v
    p = SimParams(h=0.5)
    u = _scaled(lambda e: BASIS.chi(0, e), sg, vg, p)
    mass, energy, ang = mm.conservation_functionals(u, vg, sg, p)
    vol = sg.volume.sum()
    assert mass == pytest.approx(vol, rel=1e-10)
    r2 = sg.volume @ np.sum(sg.pos**2, axis=1)
    assert energy == pytest.approx(3 * vol + p.h**2 * r2, rel=1e-10)
    assert np.max(np.abs(ang)) <= 1e-12


def test_conservation_functionals_vanish_for_odd_fields(grids):
    sg, vg = grids
    p = SimParams(h=0.5)
    u = _scaled(lambda e: BASIS.chi(1, e), sg, vg, p)
    mass, energy, ang = mm.conservation_functionals(u, vg, sg, p)
    assert abs(mass) <= 1e-14 and abs(energy) <= 1e-14
    # y x e_1 integrates to zero over the symmetric ball
    assert np.max(np.abs(ang)) <= 1e-14


def test_field_shape_is_checked(grids):
    sg, vg = grids
    with pytest.raises(ValueError, match="does not match"):
        mm.decompose(np.zeros((3, 3)), vg, sg, SimParams(h=0.5))


# ----------------------------------------------------------------- elliptic


def _phi_exact(y):
    return (1 - np.sum(y * y, axis=-1)) ** 2


def _neumann_error(n):
    sg = SpatialGrid(n)
    sol = mm.solve_poisson_neumann(lambda y: 12 - 20 * np.sum(y * y, axis=1), sg)
    ex = _phi_exact(sg.pos)
    ins = sg.inside
    w = sg.volume[ins]
    ex_m = ex[ins] - w @ ex[ins] / w.sum()
    ph = sol.values[ins] - w @ sol.values[ins] / w.sum()
    return np.max(np.abs(ph - ex_m)), sol


def test_neumann_manufactured_converges():
    e1, s1 = _neumann_error(13)
    e2, _ = _neumann_error(17)
    assert s1.residual <= 1e-8
    assert e2 < e1 < 0.05
    # second order: (16/12)^2 = 1.78
    assert e1 / e2 > 1.4


def test_neumann_energy_identity():
    _, sol = _neumann_error(17)
    sg = sol.grid
    ins = sg.inside
    g = sol.gradient(sg.pos[ins])
    lhs = sg.volume[ins] @ np.sum(g * g, axis=1)
    f = 12 - 20 * np.sum(sg.pos[ins] ** 2, axis=1)
    rhs = sg.volume[ins] @ (f * sol.values[ins])
    assert lhs == pytest.approx(rhs, rel=0.05)
    # continuum value 64 pi int r^4 (1 - r^2)^2 dr
    assert rhs == pytest.approx(512 * np.pi / 315, rel=0.1)


def test_neumann_zero_source():
    sg = SpatialGrid(9)
    sol = mm.solve_poisson_neumann(np.zeros(sg.size), sg)
    assert np.all(sol.values == 0) and sol.h1_norm == 0


def test_neumann_rejects_incompatible_source():
    sg = SpatialGrid(9)
    with pytest.raises(ValueError, match="compatibility"):
        mm.solve_poisson_neumann(lambda y: np.ones(len(y)), sg)


def test_vector_zero_source():
    sg = SpatialGrid(9)
    sol = mm.solve_vector_poisson_tangential(np.zeros((sg.size, 3)), sg)
    assert sol.values.shape == (sg.size, 3) and np.all(sol.values == 0)


def test_vector_boundary_conditions():
    sg = SpatialGrid(17)
    src = lambda y: np.stack([np.ones(len(y)), y[:, 0], y[:, 1] * y[:, 2]], axis=1)
    sol = mm.solve_vector_poisson_tangential(src, sg)
    assert sol.residual <= 1e-8
    y, _ = mm.sphere_quadrature(8, 16)
    phi = sol.at(y)
    interior = sol.at(0.5 * y)
    normal = np.abs(np.sum(phi * y, axis=1)).max()
    assert normal <= 0.05 * np.abs(interior).max()


# ----------------------------------------------------------- test functions


def test_constant_potential_gives_zero_test_function():
    p = SimParams(h=0.5)
    pot = mm.AnalyticPotential(lambda y: np.ones(y.shape[:-1]), lambda y: np.zeros(y.shape))
    psi = mm.test_function("c", pot, p)
    eta = np.random.default_rng(0).standard_normal((50, 3))
    y = np.zeros((50, 3))
    assert np.all(psi(y, eta) == 0)


def test_psi_c_orthogonal_to_invariants(fine_v):
    p = SimParams(h=0.5)
    pot = mm.AnalyticPotential(_phi_exact, lambda y: -4 * y * (1 - np.sum(y * y, axis=-1))[..., None])
    psi = mm.test_function("c", pot, p)
    y = np.broadcast_to(np.array([0.3, -0.2, 0.4]), fine_v.nodes.shape)
    vals = psi(y, fine_v.nodes)
    X = BASIS.chis(fine_v.nodes)
    inner = (vals * fine_v.weights) @ X
    assert np.max(np.abs(inner)) <= 1e-10 * np.max(np.abs(vals))


def test_psi_a_splits_into_burnette_and_momentum(fine_v):
    p = SimParams(h=0.5)
    grad = np.array([0.7, -0.1, 0.2])
    pot = mm.AnalyticPotential(lambda y: y @ grad, lambda y: np.broadcast_to(grad, y.shape))
    psi = mm.test_function("a", pot, p)
    y = np.broadcast_to(np.array([0.1, 0.2, 0.3]), fine_v.nodes.shape)
    vals = psi(y, fine_v.nodes)
    e = fine_v.nodes
    mt = np.sqrt(mu_tilde(y[0], p.h))
    ref = sum(grad[j] * (np.sqrt(10) * BASIS.A(j + 1, e) - 5 * BASIS.chi(j + 1, e)) for j in range(3)) * mt
    assert np.allclose(vals, ref, atol=1e-14)


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        mm.test_function("z", None, SimParams(h=0.5))


def test_boundary_term_vanishes_for_neumann_potential():
    p = SimParams(h=0.5)
    pot = mm.AnalyticPotential(_phi_exact, lambda y: -4 * y * (1 - np.sum(y * y, axis=-1))[..., None])
    u = lambda y, eta: np.sum(eta * eta, axis=-1)
    assert abs(mm.boundary_term("c", pot, u, p)) <= 1e-12
    # same specular-even u, but d_n phi = 1 on the sphere: the term survives
    radial = mm.AnalyticPotential(lambda y: 0.5 * np.sum(y * y, axis=-1), lambda y: y)
    assert abs(mm.boundary_term("c", radial, u, p)) > 1e-3


def test_sphere_quadrature_exact_on_polynomials():
    y, w = mm.sphere_quadrature()
    assert w.sum() == pytest.approx(4 * np.pi, rel=1e-13)
    assert w @ y[:, 2] ** 2 == pytest.approx(4 * np.pi / 3, rel=1e-13)
    assert w @ (y[:, 0] ** 2 * y[:, 1] ** 2) == pytest.approx(4 * np.pi / 15, rel=1e-13)
