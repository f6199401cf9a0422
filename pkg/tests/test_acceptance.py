"""Acceptance suite: one test per criterion, each printing one PASS/FAIL line."""
import time

import numpy as np
import pytest

from kinetics import audits, cli
from kinetics import solver as sv
from kinetics.collision import kernel_k
from kinetics.config import RunConfig, parse_config
from kinetics.frames import SimParams
from kinetics.grids import VelocityGrid

P = SimParams(h=0.5)


def _summary(res, names=None):
    checks = [c for c in res.checks if names is None or c.name in names]
    ok = all(c.passed for c in checks)
    text = "; ".join(f"{c.name}={c.value:.3e}{'' if c.passed else ' (FAIL)'}" for c in checks)
    return ok, text


def _check(manifest, name):
    return next(c for c in manifest.checks if c.name == name)


# ------------------------------------------------------------ trajectories


def test_01_characteristic_exactness(accept):
    res = audits.characteristic_audit(P, n=1000, max_step=1e-4)
    ok, text = _summary(res)
    ok = ok and res.seconds < 10
    accept(1, "characteristic exactness", ok, f"{text}; {res.seconds:.1f} s (< 10 s)")


def test_02_exit_time_closed_form(accept):
    res = audits.exit_time_audit(P, n=10_000)
    ok, text = _summary(res)
    ok = ok and res.seconds < 30
    accept(2, "exit-time closed form", ok, f"{text}; {res.seconds:.1f} s (< 30 s)")


def test_03_velocity_lemma(accept):
    res = audits.velocity_lemma_audit(P, n=1000)
    ok, text = _summary(res)
    accept(3, "velocity lemma certification", ok, text)


def test_04_continuity_dichotomy(accept):
    res = audits.continuity_audit(P, eps_list=(1e-2, 1e-3, 1e-4))
    ok, text = _summary(res)
    accept(4, "continuity dichotomy", ok, text)


def test_05_jacobian_identity(accept):
    res = audits.jacobian_audit(P, n=100)
    ok, text = _summary(res)
    accept(5, "jacobian identity", ok, text)


# ------------------------------------------------------------ operators


def test_06_operator_audit(accept):
    res = audits.operator_audit(sizes=(15, 21, 27), eta_max=6.0, n_slices=100, n_mc=200_000)
    # pointwise kernel symmetry is exact in floating point (same expression in both orders)
    rng = np.random.default_rng(6)
    a, b = rng.uniform(-6, 6, (2, 2000, 3))
    exact = bool(np.all(kernel_k(a, b) == kernel_k(b, a)))
    ok, text = _summary(res)
    ok = ok and exact and res.seconds < 300
    accept(6, "operator audit", ok, f"pointwise symmetry exact={exact}; {text}; {res.seconds:.0f} s (< 300 s)")


def test_07_burnette_gram(accept):
    res = audits.burnette_audit(n=33, eta_max=8.0)
    ok, text = _summary(res)
    accept(7, "Burnette Gram table", ok, text)


def test_08_elliptic_audit(accept):
    res = audits.elliptic_audit(P, sizes=(25, 33, 41))
    ok, text = _summary(res)
    accept(8, "elliptic audit", ok, text)


# ------------------------------------------------------------ solver runs


@pytest.fixture(scope="module")
def linear_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("linear")
    c = parse_config("experiment = linear-decay\n")
    return [(cli.run(c, base / d), base / d) for d in ("a", "b")]


@pytest.fixture(scope="module")
def density_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("density")
    c = parse_config("experiment = density-sandwich\n")
    return cli.run(c, base), base


def _w0(y, e):
    return np.exp(-0.3 * np.sum(e * e, -1)) * (1 + 0.5 * np.sum(y * y, -1)) * (1 + 0.2 * np.sum(y * e, -1) ** 2)


def test_09_linear_solver(accept, linear_runs):
    from kinetics.trajectories import backward_path

    # transport-only: exact characteristics and attenuation against the path oracle
    sg, vg = sv.solver_grid(7), VelocityGrid(9, 6.0)
    f0 = sv.DistributionField.from_function(_w0, sg, vg, P)
    ser, _ = sv.solve_linear(f0, None, 2.0, 4, collision="attenuation", mode="exact", keep=[4])
    F = ser[-1]
    rng = np.random.default_rng(9)
    worst, n = 0.0, 0
    for i in rng.choice(np.nonzero(sg.inside)[0], 400):
        j = rng.integers(vg.size)
        y, e = sg.pos[i], vg.nodes[j]
        if np.linalg.norm(y) > 1 - 1e-9 and abs(y @ e) < 1e-9:
            continue  # grazing wall node: no backward flight into the ball
        path = backward_path(2.0, y, e, P.h)
        yb, eb = path.at(0.0)
        ref = _w0(yb, eb) * sv.duhamel_attenuation(path, (0.0, 2.0), P)
        worst = max(worst, abs(ref - F.values[i, j]) / abs(ref))
        n += 1
    manifest, out = linear_runs[0]
    l2 = np.loadtxt(out / "decay.tsv", skiprows=1)[:, 1]
    lam = _check(manifest, "lambda_hat_l2")
    r2 = _check(manifest, "fit_quality_l2")
    ok = worst <= 1e-6 and lam.passed and r2.passed and l2[-1] < l2[0]
    accept(9, "linear solver", ok,
           f"transport-only max rel err {worst:.2e} over {n} nodes (<= 1e-6); "
           f"lambda_hat={lam.value:.4f} (> 0), r^2={r2.value:.4f} (>= 0.9), |u|_2 {l2[0]:.3e} -> {l2[-1]:.3e}")


def test_10_nonlinear_picard(accept, density_run):
    sg, vg = sv.solver_grid(5), VelocityGrid(9, 4.0)
    zero = sv.DistributionField(np.zeros((sg.size, vg.size)), 0.0, "w", sg, vg, SimParams(h=0.05))
    Z, _, zstate = sv.picard_solve(zero, 1.0, m_max=3, steps=10, n_samples=32)
    fixed = bool(np.all(Z.values == 0)) and zstate.diffs == [0.0]
    manifest, _ = density_run
    con = _check(manifest, "picard_contraction")
    lam = _check(manifest, "lambda_hat_linf")
    c = manifest.config
    ok = fixed and con.passed and lam.passed and manifest.seconds <= 600 and c.amplitude == 1e-3 and c.h == 0.05
    accept(10, "nonlinear Picard", ok,
           f"zero fixed point exact={fixed}; contraction {con.detail}; lambda_hat={lam.value:.4f} (> 0); "
           f"{manifest.seconds:.0f} s (<= 600 s)")


def test_11_density_sandwich(accept, density_run):
    manifest, out = density_run
    d = _check(manifest, "density_sandwich")
    rows = np.loadtxt(out / "density.tsv", skiprows=1)
    accept(11, "density sandwich", d.passed, f"{d.detail} over {len(rows)} levels (factor 2)")


def _raw_defect(velocity_n):
    c = RunConfig(experiment="linear-decay")
    sg, vg = sv.solver_grid(c.spatial_n), VelocityGrid(velocity_n, c.eta_max)
    w0 = sv.small_perturbation(sg, vg, c.params, c.amplitude)
    _, rep = sv.solve_linear(w0, None, c.tau_end, c.steps, collision="off", keep=[c.steps])
    return sum(rep.defect) / rep.scale


def test_12_conservation(accept, linear_runs, density_run):
    lin = _check(linear_runs[0][0], "conservation_drift")
    pic = _check(density_run[0], "conservation_drift")
    # size of the interpolation defect removed by the conservative correction, summed over the run
    coarse, fine = _raw_defect(11), _raw_defect(15)
    ok = lin.passed and pic.passed and fine < coarse
    accept(12, "conservation", ok,
           f"drift linear {lin.value:.2e}, Picard {pic.value:.2e} (<= 1e-3); "
           f"raw transport defect 11^3 {coarse:.3e} -> 15^3 {fine:.3e}")


def test_13_determinism(accept, linear_runs):
    (_, a), (_, b) = linear_runs
    same = (a / "decay.tsv").read_bytes() == (b / "decay.tsv").read_bytes()
    accept(13, "determinism", same, f"decay.tsv byte-identical across two runs: {same}")
