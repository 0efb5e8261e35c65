"""Flat ``key = value`` experiment configuration with strict key checking.

Lists are comma separated. Lines starting with ``#`` are comments. Every
field has a default, so a config file only needs the keys it changes.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..spectral import SpecError, WaveSpec

EXPERIMENTS = ("gap", "invariance", "tracking", "delta-convergence", "noise-stats", "attractor")


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors) if not isinstance(errors, str) else [errors]
        super().__init__("; ".join(self.errors))


@dataclass
class ExperimentConfig:
    experiment: str = "gap"
    # wave parameters
    epsilon: float = 0.01
    M: int = 32
    N: int = 10
    G: int = 0  # 0 selects 4 M
    nonlinearity: str = "sin"
    c: float = 1.0
    delta: float = 0.1
    phi: list = field(default_factory=lambda: [1.0])
    # numerics
    step: float = 1e-4
    noise_step: float = 0.0  # 0 selects step (step/2 when halving)
    T_back: float = 0.0  # 0 selects the certified default
    tol: float = 1e-8
    max_iter: int = 200
    T_f: float = 0.0  # 0 selects ln(1/tol)/(alpha-eta)
    scheme: str = "lawson"
    halving: bool = True
    # sampling
    seeds: list = field(default_factory=lambda: [0])
    R: float = 1.0
    xi_points: int = 5
    n_starts: int = 10
    n_linear: int = 0
    n_on_manifold: int = 0
    times: list = field(default_factory=lambda: [0.1, 0.5, 1.0])
    # delta-convergence
    delta_grid: list = field(default_factory=lambda: [0.5, 0.25, 0.125, 0.0625, 0.03125])
    densify: int = 3
    # gap atlas
    eps_grid: list = field(default_factory=lambda: [0.01])
    N_grid: list = field(default_factory=lambda: [10])
    lip_grid: list = field(default_factory=lambda: [0.0, 1.0])
    # noise statistics
    ou_lambda: float = 1.0
    ou_delta: float = 1.0
    horizon: float = 1000.0
    burn_in: float = 20.0
    stat_horizons: list = field(default_factory=lambda: [10.0, 100.0, 1000.0])
    # attractor
    pull_times: list = field(default_factory=lambda: [0.01, 0.02, 0.04, 0.08])
    linear_pull_times: list = field(default_factory=lambda: [0.05, 0.1, 0.15, 0.2, 0.25])
    n_samples: int = 5
    # thresholds
    tol_inv: float = 1e-3
    halving_factor: float = 1.5
    contraction_slack: float = 0.05
    rate_slack: float = 0.1
    linear_rate_rtol: float = 0.05
    slope_range: list = field(default_factory=lambda: [0.8, 1.2])
    output_dir: str = "out"

    # ------------------------------------------------------------------
    def wave_spec(self, **over) -> WaveSpec:
        kw = dict(
            epsilon=self.epsilon, M=self.M, N=self.N, G=self.G or None,
            nonlinearity=self.nonlinearity, c=self.c, delta=self.delta,
            phi_modes=tuple(self.phi),
        )
        kw.update(over)
        return WaveSpec(**kw)

    def validate(self) -> "ExperimentConfig":
        errs = []
        if self.experiment not in EXPERIMENTS:
            errs.append(f"experiment: unknown tag {self.experiment!r}")
        for name in ("step", "tol", "tol_inv", "R", "ou_lambda", "horizon", "halving_factor"):
            if not getattr(self, name) > 0:
                errs.append(f"{name}: must be positive")
        for name in ("noise_step", "T_back", "T_f", "burn_in", "ou_delta", "contraction_slack",
                     "rate_slack", "linear_rate_rtol"):
            if getattr(self, name) < 0:
                errs.append(f"{name}: must be non-negative")
        if not self.seeds:
            errs.append("seeds: must be non-empty")
        if self.max_iter < 1:
            errs.append("max_iter: must be at least 1")
        if self.scheme not in ("lawson", "etd"):
            errs.append(f"scheme: unknown integrator {self.scheme!r}")
        if self.experiment == "delta-convergence":
            g = self.delta_grid
            if not g or any(d < 0 for d in g) or any(a <= b for a, b in zip(g, g[1:])):
                errs.append("delta_grid: must be non-empty, non-negative and strictly decreasing")
        if len(self.slope_range) != 2 or self.slope_range[0] > self.slope_range[1]:
            errs.append("slope_range: expected two increasing values")
        if self.noise_step and self.step / self.noise_step - round(self.step / self.noise_step) > 1e-9:
            errs.append("noise_step: must divide step")
        if self.experiment in ("invariance", "tracking", "delta-convergence", "attractor"):
            try:
                self.wave_spec()
            except (SpecError, ValueError) as exc:
                errs.append(f"spec: {exc}")
        if errs:
            raise ConfigError(errs)
        return self


_TYPES = {f.name: f for f in fields(ExperimentConfig)}


def _kind(name) -> str:
    return _TYPES[name].type


def _convert(name: str, raw: str):
    kind = _kind(name)
    raw = raw.strip()
    if kind == "list":
        if raw == "":
            return []
        vals = [float(x) for x in raw.split(",")]
        return [int(v) for v in vals] if name == "seeds" else vals
    if kind == "int":
        return int(raw)
    if kind == "float":
        v = float(raw)
        if not math.isfinite(v):
            raise ValueError("non-finite value")
        return v
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return raw


def parse_config(text: str, *, validate: bool = True) -> ExperimentConfig:
    values, errs = {}, []
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            errs.append(f"line {lineno}: expected key = value")
            continue
        k, v = (p.strip() for p in s.split("=", 1))
        if k not in _TYPES:
            errs.append(f"line {lineno}: unknown key {k!r}")
            continue
        if k in values:
            errs.append(f"line {lineno}: duplicate key {k!r}")
            continue
        try:
            values[k] = _convert(k, v)
        except ValueError as exc:
            errs.append(f"line {lineno}: bad value for {k}: {exc}")
    if errs:
        raise ConfigError(errs)
    cfg = ExperimentConfig(**values)
    return cfg.validate() if validate else cfg


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def dump_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in asdict(cfg).items())


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())
