"""Run configuration: line-oriented ``key = value`` text with ``#`` comments."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

from .frames import SimParams

EXPERIMENTS = (
    "trajectory-audit",
    "operator-audit",
    "elliptic-audit",
    "linear-decay",
    "nonlinear-decay",
    "density-sandwich",
    "reverse-reflection-demo",
)

DESCRIPTIONS = {
    "trajectory-audit": "characteristics vs RK4, exit times, bounce-spacing clauses, continuity, Jacobian",
    "operator-audit": "kernel symmetry, row integrals, null space, dissipation, MC comparison, Gram table",
    "elliptic-audit": "manufactured-solution convergence and boundary-term checks",
    "linear-decay": "linear weighted equation from microscopic data, fitted decay rate",
    "nonlinear-decay": "Picard iteration from small data, contraction ratios and fitted decay rate",
    "density-sandwich": "lab-frame density bounds over a nonlinear run",
    "reverse-reflection-demo": "discontinuity of backward paths under the reverse reflection rule",
}


# trajectory experiments are audited at the A-set scale h = 0.5 unless h is given
DEFAULT_H = {"trajectory-audit": 0.5, "reverse-reflection-demo": 0.5}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass(frozen=True)
class RunConfig:
    experiment: str
    h: float = 0.05
    beta: float = 2.0
    spatial_n: int = 9
    velocity_n: int = 11
    eta_max: float = 5.0
    dtau: float = 0.0         # 0 selects (pi / 2h) / 400
    tau_end: float = 3.0
    amplitude: float = 1e-3   # sup norm of the initial weighted perturbation
    picard_max: int = 6
    picard_tol: float = 1e-10
    smallness: float = 1e-2
    gamma_samples: int = 512
    sweeps: int = 2
    seed: int = 20240521
    output: str = "out"

    @property
    def params(self) -> SimParams:
        return SimParams(h=self.h, beta=self.beta, eta_max=self.eta_max, seed=self.seed)

    @property
    def step(self) -> float:
        return self.dtau if self.dtau > 0 else 0.5 * math.pi / self.h / 400

    @property
    def steps(self) -> int:
        return max(1, int(round(self.tau_end / self.step)))


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_TYPES = {"experiment": str, "output": str, "spatial_n": int, "velocity_n": int, "picard_max": int,
          "gamma_samples": int, "sweeps": int, "seed": int}


def _range_errors(c: RunConfig):
    # (field, ok) pairs checked against the module preconditions
    yield "experiment", c.experiment in EXPERIMENTS
    yield "h", 0 < c.h <= 1
    yield "beta", c.beta > 1.5
    yield "spatial_n", c.spatial_n >= 5 and c.spatial_n % 2 == 1
    yield "velocity_n", c.velocity_n >= 3
    yield "eta_max", c.eta_max > 0 and 2 * c.eta_max / (c.velocity_n - 1) <= 1.0 + 1e-12
    yield "dtau", c.dtau >= 0
    yield "tau_end", 0 < c.tau_end < 0.5 * math.pi / c.h
    yield "amplitude", 0 <= c.amplitude <= c.smallness
    yield "picard_max", c.picard_max >= 1
    yield "picard_tol", c.picard_tol > 0
    yield "smallness", c.smallness > 0
    yield "gamma_samples", c.gamma_samples >= 1
    yield "sweeps", c.sweeps >= 1
    yield "seed", c.seed >= 0
    yield "output", bool(c.output)


def validate(c: RunConfig) -> RunConfig:
    for name, ok in _range_errors(c):
        if not ok:
            raise ConfigError(f"{name}: value {getattr(c, name)!r} out of range")
    return c


def _convert(key, raw: str):
    kind = _TYPES.get(key, float)
    if kind is str:
        return raw
    try:
        if kind is int:
            return int(raw)
        v = float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {raw!r}") from None
    if not math.isfinite(v):
        raise ConfigError(f"{key}: value {raw!r} is not finite")
    return v


def parse_config(text: str) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{key}: unknown key")
        if key in values:
            raise ConfigError(f"{key}: given twice")
        values[key] = _convert(key, raw)
    if "experiment" not in values:
        raise ConfigError("experiment: missing (the config must name an experiment)")
    if "h" not in values and values["experiment"] in DEFAULT_H:
        values["h"] = DEFAULT_H[values["experiment"]]
    return validate(RunConfig(**values))


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def serialize_config(c: RunConfig) -> str:
    return "".join(f"{f} = {_fmt(getattr(c, f))}\n" for f in _FIELDS)
