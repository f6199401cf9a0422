import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from kinetics import solver as sv
from kinetics.collision import BASIS, nu_of_speed
from kinetics.frames import SimParams, alpha, mu, mu_tilde, radius
from kinetics.grids import VelocityGrid
from kinetics.trajectories import backward_path


@pytest.fixture(scope="module")
def small():
    p = SimParams(h=0.5)
    return sv.solver_grid(5), VelocityGrid(9, 4.0), p


def _w0(y, e):
    return np.exp(-0.3 * np.sum(e * e, -1)) * (1 + 0.5 * np.sum(y * y, -1)) * (1 + 0.2 * np.sum(y * e, -1) ** 2)


# ------------------------------------------------------------ attenuation


def test_attenuation_empty_span_is_one():
    path = backward_path(1.0, np.array([0.2, 0.1, 0.0]), np.array([1.0, 0.5, 0.0]), 0.5)
    assert sv.duhamel_attenuation(path, (0.4, 0.4), SimParams(h=0.5)) == 1.0
    with pytest.raises(ValueError):
        sv.duhamel_attenuation(path, (0.6, 0.4), SimParams(h=0.5))


def test_attenuation_matches_adaptive_quadrature():
    p = SimParams(h=0.5)
    path = backward_path(2.5, np.array([0.3, -0.2, 0.1]), np.array([2.0, 1.0, -0.5]), p.h)
    assert path.n_bounces >= 1

    def a(s):
        y, e = path.at(np.array([s]))
        return float(mu_tilde(y, p.h)[0] * np.cos(p.h * s) ** 2 * nu_of_speed(np.linalg.norm(e[0])))

    ref, _ = quad(a, 0.3, 2.5, points=list(path.taus[(path.taus > 0.3) & (path.taus < 2.5)]), limit=200,
                  epsabs=1e-13, epsrel=1e-12)
    got = sv.duhamel_attenuation(path, (0.3, 2.5), p)
    assert got == pytest.approx(np.exp(-ref), rel=1e-9)


def test_vectorized_trace_matches_path_oracle(rng):
    p = SimParams(h=0.5)
    y = rng.uniform(-0.55, 0.55, size=(20, 3))
    e = rng.normal(scale=1.5, size=(20, 3))
    att, yb, eb = sv.trace_attenuation(y, e, 2.0, 2.0, p)
    for k in range(20):
        path = backward_path(2.0, y[k], e[k], p.h)
        y0, e0 = path.at(0.0)
        assert np.allclose(yb[k], y0, atol=1e-9) and np.allclose(eb[k], e0, atol=1e-9)
        assert att[k] == pytest.approx(sv.duhamel_attenuation(path, (0.0, 2.0), p), rel=1e-7)


# ------------------------------------------------------------ linear solver


def test_exact_mode_matches_path_oracle(small):
    _, vg, p = small
    sg = sv.solver_grid(7)
    vg = VelocityGrid(9, 6.0)
    f0 = sv.DistributionField.from_function(_w0, sg, vg, p)
    ser, _ = sv.solve_linear(f0, None, 2.0, 4, collision="attenuation", mode="exact", keep=[4])
    F = ser[-1]
    rng = np.random.default_rng(1)
    worst = 0.0
    for i in rng.choice(np.nonzero(sg.inside)[0], 150):
        j = rng.integers(vg.size)
        y, e = sg.pos[i], vg.nodes[j]
        r = np.linalg.norm(y)
        if r > 1 - 1e-9 and abs(y @ e) < 1e-9:
            continue  # grazing wall node: no backward flight into the ball
        path = backward_path(2.0, y, e, p.h)
        yb, eb = path.at(0.0)
        ref = _w0(yb, eb) * sv.duhamel_attenuation(path, (0.0, 2.0), p)
        worst = max(worst, abs(ref - F.values[i, j]) / abs(ref))
    assert worst <= 1e-6


def test_exact_mode_rejects_bad_input(small):
    sg, vg, p = small
    f0 = sv.DistributionField.from_function(_w0, sg, vg, p)
    with pytest.raises(ValueError):
        sv.solve_linear(f0, None, 1.0, 2, collision="full", mode="exact")
    with pytest.raises(ValueError):
        sv.solve_linear(f0, None, 1.0, 2, mode="sideways")
    bare = sv.DistributionField(f0.values, 0.0, "w", sg, vg, p)
    with pytest.raises(ValueError):
        sv.solve_linear(bare, None, 1.0, 2, collision="off", mode="exact")


def test_zero_data_stays_zero(small):
    sg, vg, p = small
    zero = sv.DistributionField(np.zeros((sg.size, vg.size)), 0.0, "w", sg, vg, p)
    ser, rep = sv.solve_linear(zero, None, 1.0, 10)
    assert all(np.all(F.values == 0) for F in ser)
    assert max(rep.linf) == 0 and max(rep.l2) == 0


def test_zero_is_a_picard_fixed_point(small):
    sg, vg, p = small
    zero = sv.DistributionField(np.zeros((sg.size, vg.size)), 0.0, "w", sg, vg, p)
    F, rep, state = sv.picard_solve(zero, 1.0, m_max=3, steps=10, n_samples=32)
    assert np.all(F.values == 0)
    assert state.diffs == [0.0]
    assert sv.contraction_onset(state) == (True, 0.0)


def test_linear_march_decays_and_conserves(small):
    sg, vg, p = small
    p = SimParams(h=0.05)
    w0 = sv.small_perturbation(sg, vg, p)
    steps = 24
    dt = (np.pi / (2 * p.h)) / 400
    ser, rep = sv.solve_linear(w0, None, steps * dt * 4, steps)
    assert rep.linf[-1] < rep.linf[0]
    assert rep.conservation_drift(rep.scale) <= 1e-3


def test_picard_rejects_large_data(small):
    sg, vg, p = small
    big = sv.DistributionField(np.full((sg.size, vg.size), 0.5), 0.0, "w", sg, vg, p)
    with pytest.raises(ValueError, match="smallness"):
        sv.picard_solve(big, 1.0, steps=4)


def test_source_needs_collision(small):
    sg, vg, p = small
    zero = sv.DistributionField(np.zeros((sg.size, vg.size)), 0.0, "w", sg, vg, p)
    g = sv.SourceTerm(lambda t, y, e: BASIS.A(1, e) * np.ones(y.shape[:-1]))
    with pytest.raises(ValueError):
        sv.solve_linear(zero, g, 1.0, 4, collision="off")


def test_coarse_velocity_grid_rejected():
    with pytest.raises(ValueError, match="spacing"):
        sv.check_velocity_grid(VelocityGrid(9, 6.0))
    sv.check_velocity_grid(VelocityGrid(11, 5.0))


# ------------------------------------------------------------ decay fit


def _report(values, h=0.5, n=30):
    rep = sv.DecayReport(h=h)
    taus = np.linspace(0, 2.5, n)
    for t, v in zip(taus, values(taus)):
        rep.append(t, v, v, 0, 0, np.zeros(3))
    return rep


def test_decay_fit_recovers_rate():
    p = SimParams(h=0.5)
    lam, r2 = sv.decay_fit(_report(lambda t: 3 * np.exp(-0.7 * alpha(t, p))))
    assert lam == pytest.approx(0.7, rel=1e-10) and r2 == pytest.approx(1.0, abs=1e-12)


def test_decay_fit_with_noise():
    p = SimParams(h=0.5)
    noise = np.random.default_rng(3).normal(scale=0.01, size=30)
    lam, r2 = sv.decay_fit(_report(lambda t: np.exp(-0.7 * alpha(t, p)) * (1 + noise)))
    assert abs(lam - 0.7) < 0.05 and r2 > 0.9


def test_decay_fit_constant_series():
    assert sv.decay_fit(_report(lambda t: np.full_like(t, 2.0))) == (0.0, 1.0)


def test_decay_fit_errors():
    with pytest.raises(ValueError, match="10 samples"):
        sv.decay_fit(_report(lambda t: np.ones_like(t), n=5))
    with pytest.raises(ValueError, match="all-zero"):
        sv.decay_fit(_report(lambda t: np.zeros_like(t)))
    with pytest.raises(ValueError, match="positive"):
        sv.decay_fit(_report(lambda t: np.where(t > 1, -1.0, 1.0)))


def test_report_times_must_increase():
    rep = sv.DecayReport()
    rep.append(0.0, 1, 1, 0, 0, np.zeros(3))
    with pytest.raises(ValueError):
        rep.append(0.0, 1, 1, 0, 0, np.zeros(3))


def test_report_drift_and_tsv():
    rep = sv.DecayReport()
    rep.append(0.0, 1, 1, 1.0, 2.0, np.zeros(3))
    rep.append(0.1, 1, 1, 1.5, 2.0, np.array([0, 0.25, 0]))
    assert rep.conservation_drift() == 0.5
    assert rep.conservation_drift(10.0) == 0.05
    lines = rep.to_tsv().splitlines()
    assert lines[0].split("\t")[0] == "tau" and len(lines) == 3


def test_contraction_onset_rules():
    st_ok = sv.PicardState(m=5, field=None, diffs=[1, 2, 1, 0.5, 0.2], ratios=[2, 0.5, 0.5, 0.4])
    assert sv.contraction_onset(st_ok) == (True, 0.5)
    st_bad = sv.PicardState(m=6, field=None, diffs=[1] * 6, ratios=[1.0] * 5)
    assert sv.contraction_onset(st_bad)[0] is False


# ------------------------------------------------------------ fields


def test_field_conversions_round_trip(small, rng):
    sg, vg, p = small
    u = 1e-3 * rng.standard_normal((sg.size, vg.size))
    F = sv.DistributionField(u, 0.0, "u", sg, vg, p)
    for kind in ("w", "f"):
        back = F.as_kind(kind).as_kind("u").values
        assert np.allclose(back, u, rtol=1e-10, atol=1e-16)
    M = mu_tilde(sg.pos, p.h)[:, None] * mu(vg.nodes)[None, :]
    zero = sv.DistributionField(np.zeros_like(u), 0.0, "u", sg, vg, p)
    assert np.array_equal(zero.to_f(), M)


def test_field_validation(small):
    sg, vg, p = small
    with pytest.raises(ValueError, match="kind"):
        sv.DistributionField(np.zeros((sg.size, vg.size)), 0.0, "q", sg, vg, p)
    with pytest.raises(ValueError, match="shape"):
        sv.DistributionField(np.zeros((2, 2)), 0.0, "w", sg, vg, p)
    bad = np.zeros((sg.size, vg.size))
    bad[0, 0] = np.nan
    with pytest.raises(ValueError, match="finite"):
        sv.DistributionField(bad, 0.0, "w", sg, vg, p)


def test_microscopic_projection(small, rng):
    sg, vg, p = small
    F = sv.DistributionField(rng.standard_normal((sg.size, vg.size)), 0.0, "u", sg, vg, p).microscopic()
    X = BASIS.chis(vg.nodes)
    assert np.max(np.abs((F.values * vg.weights) @ X)) <= 1e-12


def test_small_perturbation_properties(small):
    sg, vg, p = small
    w0 = sv.small_perturbation(sg, vg, p, amplitude=2e-3)
    assert np.max(np.abs(w0.values)) == pytest.approx(2e-3, rel=1e-12)
    assert np.all(w0.values[sg.inside & (sg.radius >= 0.8)] == 0)
    X = BASIS.chis(vg.nodes)
    assert np.max(np.abs((w0.to_u() * vg.weights) @ X)) <= 1e-12


def test_lab_density_of_equilibrium(small):
    sg, vg, p = small
    F = sv.DistributionField(np.zeros((sg.size, vg.size)), 0.7, "u", sg, vg, p)
    samples = sv.lab_density(F)
    t = np.tan(p.h * 0.7) / p.h
    R = radius(t, p.h)
    rows = np.nonzero(sg.inside)[0]
    assert len(samples) == len(rows)
    for (tt, x, rho), y in zip(samples, sg.pos[rows]):
        assert tt == pytest.approx(t)
        assert rho == pytest.approx(mu_tilde(y, p.h) / R**3, rel=1e-14)


def test_source_microscopic_check(small):
    sg, _, p = small
    vg = VelocityGrid(33, 8.0)
    ok = sv.SourceTerm(lambda t, y, e: BASIS.A(1, e) * np.ones(y.shape[:-1]))
    assert ok.check_microscopic([0.0, 1.0], sg, vg, tol=1e-6) <= 1e-6
    bad = sv.SourceTerm(lambda t, y, e: BASIS.chi(0, e) * np.ones(y.shape[:-1]))
    with pytest.raises(ValueError, match="microscopic"):
        bad.check_microscopic([0.0], sg, vg)
    assert sv.SourceTerm().is_zero


@settings(max_examples=25, deadline=None)
@given(c=st.lists(st.floats(-2, 2), min_size=7, max_size=7), seed=st.integers(0, 2**31))
def test_interpolation_exact_on_affine_fields(small, c, seed):
    sg, vg, p = small
    c = np.asarray(c)
    fn = lambda y, e: c[0] + y @ c[1:4] + e @ c[4:7]
    y, e = sv._node_points(sg, vg)
    F = fn(y, e).reshape(sg.size, vg.size)
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(30, 3))
    pts *= (rng.uniform(0, 1, 30) ** (1 / 3) / np.linalg.norm(pts, axis=1))[:, None]
    vel = rng.uniform(-4, 4, size=(30, 3))
    got = sv.interpolate(F, sg, vg, pts, vel)
    assert np.allclose(got, fn(pts, vel), atol=1e-11)


# ------------------------------------------------------------ positivity


def test_positivity_keeps_equilibrium(small):
    sg, vg, p = small
    M = mu_tilde(sg.pos, p.h)[:, None] * mu(vg.nodes)[None, :]
    f0 = sv.DistributionField.from_function(lambda y, e: mu_tilde(y, p.h) * mu(e), sg, vg, p, kind="f")
    res = sv.positivity_iterate(f0, 1.0, m_max=2, steps=8, n_samples=64)
    assert min(res.min_ratio) > 1 - 1e-6
    assert np.allclose(res.iterates[-1].values[sg.inside], M[sg.inside], rtol=1e-6)


def test_positivity_of_bump(small):
    sg, vg, p = small

    def f0(y, e):
        bump = np.clip(1 - np.sum(y * y, -1) / 0.64, 0, None) ** 2
        return mu_tilde(y, p.h) * mu(e - np.array([1.0, 0, 0])) * bump

    F = sv.DistributionField.from_function(f0, sg, vg, p, kind="f")
    res = sv.positivity_iterate(F, 1.0, m_max=3, steps=8, n_samples=64)
    assert all(r >= 0 for r in res.min_ratio)
    for m, tol in zip(res.mass, res.tolerance):
        assert abs(m[-1] - m[0]) <= tol


def test_positivity_rejects_negative_data(small):
    sg, vg, p = small
    F = sv.DistributionField(-np.ones((sg.size, vg.size)), 0.0, "f", sg, vg, p)
    with pytest.raises(ValueError, match="nonnegative"):
        sv.positivity_iterate(F, 1.0)
    with pytest.raises(ValueError):
        sv.positivity_iterate(F.as_kind("u"), 1.0)
