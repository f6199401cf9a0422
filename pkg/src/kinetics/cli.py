"""Command line front end: ``kinetics run --config FILE`` and ``kinetics list-experiments``."""
from __future__ import annotations

import argparse
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import audits
from . import solver as sv
from .config import DESCRIPTIONS, EXPERIMENTS, ConfigError, RunConfig, parse_config, serialize_config
from .frames import density_bounds_check
from .grids import VelocityGrid

THREADS_ENV = "KINETICS_THREADS"
CONSERVATION_TOL = 1e-3  # functional drift relative to the perturbation energy scale


@dataclass
class RunManifest:
    config: RunConfig
    version: str = __version__
    seconds: float = 0.0
    checks: list = field(default_factory=list)  # audits.Check
    files: list = field(default_factory=list)

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def text(self):
        lines = [f"# kinetics {self.version}", f"wall_clock_seconds = {self.seconds:.3f}", "[config]"]
        lines += serialize_config(self.config).splitlines()
        lines.append("[checks]")
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            lines.append(f"{status}\t{c.name}\tvalue={c.value:.6e}\tthreshold={c.threshold:.6e}\t{c.detail}")
        lines.append(f"overall = {'PASS' if self.passed else 'FAIL'}")
        lines.append("[files]")
        lines += self.files
        return "\n".join(lines) + "\n"


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.12e}"
    return str(v)


def tsv(header, rows):
    out = ["\t".join(header)]
    out += ["\t".join(_cell(v) for v in r) for r in rows]
    return "\n".join(out) + "\n"


class _Run:
    def __init__(self, config: RunConfig, out: Path):
        self.config = config
        self.out = out
        self.manifest = RunManifest(config)

    def write(self, name, text):
        _atomic_write(self.out / name, text)
        self.manifest.files.append(name)

    def absorb(self, result: audits.AuditResult):
        self.manifest.checks += result.checks
        for name, (header, rows) in result.tables.items():
            self.write(f"{name}.tsv", tsv(header, rows))


# ---------------------------------------------------------------- presets


def _grids(c: RunConfig):
    return sv.solver_grid(c.spatial_n), VelocityGrid(c.velocity_n, c.eta_max)


def _conservation(run: _Run, rep: sv.DecayReport):
    rows = []
    for k, t in enumerate(rep.tau):
        d = rep.defect[k - 1] if k >= 1 and rep.defect else 0.0
        rows.append((t, rep.mass[k], rep.energy[k], *rep.ang[k], d))
    run.write("conservation.tsv", tsv(["tau", "mass", "energy", "angx", "angy", "angz", "correction"], rows))
    drift = rep.conservation_drift(rep.scale)
    run.manifest.checks.append(audits.Check("conservation_drift", drift <= CONSERVATION_TOL, drift,
                                            CONSERVATION_TOL, "relative to the perturbation energy scale"))


def _decay_checks(run: _Run, rep: sv.DecayReport, norm):
    lam, r2 = sv.decay_fit(rep, norm)
    run.manifest.checks.append(audits.Check(f"lambda_hat_{norm}", lam > 0, lam, 0.0, f"r^2 = {r2:.4f}"))
    return lam, r2


def _linear(run: _Run):
    c = run.config
    sg, vg = _grids(c)
    w0 = sv.small_perturbation(sg, vg, c.params, c.amplitude)
    _, rep = sv.solve_linear(w0, None, c.tau_end, c.steps, sweeps=c.sweeps, keep=[c.steps])
    run.write("decay.tsv", rep.to_tsv())
    _conservation(run, rep)
    lam, r2 = _decay_checks(run, rep, "l2")
    run.manifest.checks.append(audits.Check("fit_quality_l2", r2 >= 0.9, r2, 0.9, f"lambda_hat = {lam:.4f}"))


def _picard(run: _Run, keep_all=False):
    c = run.config
    sg, vg = _grids(c)
    w0 = sv.small_perturbation(sg, vg, c.params, c.amplitude)
    keep = list(range(c.steps + 1)) if keep_all else None
    _, rep, state = sv.picard_solve(w0, c.tau_end, m_max=c.picard_max, tol=c.picard_tol, steps=c.steps,
                                    threshold=c.smallness, n_samples=c.gamma_samples, sweeps=c.sweeps,
                                    keep=keep)
    run.write("decay.tsv", rep.to_tsv())
    run.write("picard.tsv", state.dump())
    _conservation(run, rep)
    ok, worst = sv.contraction_onset(state, within=5)
    run.manifest.checks.append(audits.Check("picard_contraction", ok, worst, 1.0,
                                            "ratios " + " ".join(f"{r:.3e}" for r in state.ratios)))
    _decay_checks(run, rep, "linf")
    return state


def _nonlinear(run: _Run):
    _picard(run)


def _density(run: _Run):
    c = run.config
    state = _picard(run, keep_all=True)
    rows = []
    lo, hi = np.inf, -np.inf
    for F in state.levels:
        samples = sv.lab_density(F)
        c0, C0, _ = density_bounds_check(samples, c.params)
        rows.append((F.tau, samples[0][0], c0, C0))
        lo, hi = min(lo, c0), max(hi, C0)
    run.write("density.tsv", tsv(["tau", "t", "min_rhoR3", "max_rhoR3"], rows))
    env_lo = float(np.exp(-0.5 * c.h**2))
    ok = np.isfinite(lo) and np.isfinite(hi) and lo > 0 and lo >= 0.5 * env_lo and hi <= 2.0
    run.manifest.checks.append(audits.Check("density_sandwich", ok, lo, 0.5 * env_lo,
                                            f"min {lo:.6f} max {hi:.6f} envelope [{env_lo:.6f}, 1]"))


def _trajectory(run: _Run):
    run.absorb(audits.trajectory_audit(run.config.params, seed=run.config.seed % 2**31))


def _operator(run: _Run):
    run.absorb(audits.operator_audit(seed=run.config.seed % 2**31))
    run.absorb(audits.burnette_audit())


def _elliptic(run: _Run):
    run.absorb(audits.elliptic_audit(run.config.params))


def _reverse(run: _Run):
    run.absorb(audits.continuity_audit(run.config.params, seed=run.config.seed % 2**31))


PRESETS = {
    "trajectory-audit": _trajectory,
    "operator-audit": _operator,
    "elliptic-audit": _elliptic,
    "linear-decay": _linear,
    "nonlinear-decay": _nonlinear,
    "density-sandwich": _density,
    "reverse-reflection-demo": _reverse,
}
assert set(PRESETS) == set(EXPERIMENTS)


def run(config: RunConfig, out=None) -> RunManifest:
    """Execute one preset, write its tables and an atomic manifest.txt."""
    r = _Run(config, Path(out or config.output))
    t = time.perf_counter()
    try:
        PRESETS[config.experiment](r)
    except Exception as exc:
        raise RuntimeError(f"experiment {config.experiment} failed: {exc}") from exc
    r.manifest.seconds = time.perf_counter() - t
    files = list(r.manifest.files) + ["manifest.txt"]
    r.manifest.files = files
    _atomic_write(r.out / "manifest.txt", r.manifest.text())
    return r.manifest


def set_threads(n=None):
    import numba

    if n is None:
        env = os.environ.get(THREADS_ENV)
        n = int(env) if env else None
    if n is not None:
        if n < 1:
            raise ConfigError(f"threads: value {n} out of range")
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def main(argv=None):
    ap = argparse.ArgumentParser(prog="kinetics")
    sub = ap.add_subparsers(dest="command", required=True)
    rp = sub.add_parser("run", help="run one experiment preset")
    rp.add_argument("--config", required=True)
    rp.add_argument("--out")
    rp.add_argument("--threads", type=int)
    sub.add_parser("list-experiments", help="list the experiment presets")
    args = ap.parse_args(argv)
    if args.command == "list-experiments":
        for name in EXPERIMENTS:
            print(f"{name}\t{DESCRIPTIONS[name]}")
        return 0
    try:
        text = Path(args.config).read_text()
        config = parse_config(text)
        set_threads(args.threads)
    except (OSError, ConfigError) as exc:
        print(f"kinetics: usage error: {exc}", file=sys.stderr)
        return 2
    try:
        manifest = run(config, args.out)
    except RuntimeError as exc:
        print(f"kinetics: {exc}", file=sys.stderr)
        return 1
    for c in manifest.checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}  {c.value:.4e}  {c.detail}")
    return 0 if manifest.passed else 1


if __name__ == "__main__":
    sys.exit(main())
