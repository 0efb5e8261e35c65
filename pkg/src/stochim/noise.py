"""Driving noise: two-sided Wiener paths, stationary OU processes, time shifts.

All paths live on a uniform grid ``t_j = (start + j) * step`` with integer
``start <= 0`` so that ``t = 0`` is always a grid point.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import lfilter

__all__ = [
    "GridError",
    "WienerPath",
    "OUParams",
    "OUPath",
    "ErgodicStats",
    "sample_wiener",
    "shift",
    "stationary_z",
    "constant_z",
    "integral_of_z",
    "ergodic_stats",
    "write_paths_csv",
    "read_paths_csv",
]

_ALIGN_RTOL = 1e-9


class GridError(ValueError):
    """A time is off-grid or outside the sampled window."""


def _grid_index(t: float, step: float) -> int:
    q = t / step
    j = round(q)
    if abs(q - j) > _ALIGN_RTOL * max(1.0, abs(q)):
        raise GridError(f"time {t!r} is not an integer multiple of step {step!r}")
    return int(j)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class WienerPath:
    """Sampled two-sided Brownian path, anchored at ``omega(0) = 0``.

    ``origin`` counts (in grid steps) how far this path has been shifted from
    the originally sampled one; derived random draws are keyed on absolute
    grid positions so shifted copies reproduce them.
    """

    seed: int
    step: float
    start: int
    values: np.ndarray
    origin: int = 0

    def __post_init__(self):
        if not self.step > 0:
            raise GridError("step must be positive")
        object.__setattr__(self, "values", _readonly(self.values))
        if self.start > 0 or self.start + len(self.values) - 1 < 0:
            raise GridError("window must contain t = 0")

    @classmethod
    def from_values(cls, step: float, t_min: float, values: Sequence[float], seed: int = -1):
        """Wrap a prescribed path (deterministic injection, mostly for tests)."""
        start = _grid_index(t_min, step)
        vals = np.asarray(values, dtype=float)
        vals = vals - vals[-start]
        return cls(seed=seed, step=step, start=start, values=vals)

    @property
    def n(self) -> int:
        return len(self.values)

    @property
    def t_min(self) -> float:
        return self.start * self.step

    @property
    def t_max(self) -> float:
        return (self.start + self.n - 1) * self.step

    @cached_property
    def times(self) -> np.ndarray:
        return _readonly((self.start + np.arange(self.n)) * self.step)

    def index(self, t: float) -> int:
        """Array index of the grid time ``t``."""
        j = _grid_index(t, self.step) - self.start
        if not 0 <= j < self.n:
            raise GridError(f"time {t} outside window [{self.t_min}, {self.t_max}]")
        return j

    def __call__(self, t):
        return _interp(self, self.values, t)


def _interp(path: WienerPath, values: np.ndarray, t):
    t_arr = np.asarray(t, dtype=float)
    lo, hi = path.t_min, path.t_max
    tol = _ALIGN_RTOL * path.step
    if np.any(t_arr < lo - tol) or np.any(t_arr > hi + tol):
        raise GridError(f"evaluation outside window [{lo}, {hi}]")
    out = np.interp(t_arr, path.times, values)
    return float(out) if out.ndim == 0 else out


def sample_wiener(seed: int, step: float, t_min: float, t_max: float) -> WienerPath:
    """Sample ``omega`` on ``[t_min, t_max]``.

    Forward and backward increments come from two independent streams spawned
    from ``seed``, so the increments near 0 do not depend on the window size.
    """
    if not step > 0:
        raise GridError("step must be positive")
    if t_min > 0 or t_max < 0:
        raise GridError("need t_min <= 0 <= t_max")
    n_neg = -_grid_index(t_min, step)
    n_pos = _grid_index(t_max, step)
    fwd_ss, bwd_ss = np.random.SeedSequence(seed).spawn(2)
    sd = math.sqrt(step)
    fwd = np.random.default_rng(fwd_ss).standard_normal(n_pos) * sd
    bwd = np.random.default_rng(bwd_ss).standard_normal(n_neg) * sd
    values = np.empty(n_neg + n_pos + 1)
    values[n_neg] = 0.0
    values[n_neg + 1:] = np.cumsum(fwd)
    # bwd[i] is omega(-(i) dt) - omega(-(i+1) dt)
    values[:n_neg] = -np.cumsum(bwd)[::-1]
    return WienerPath(seed=seed, step=step, start=-n_neg, values=values)


def shift(path: WienerPath, s: float) -> WienerPath:
    """The shifted path ``(theta_s omega)(t) = omega(t + s) - omega(s)``."""
    j_s = _grid_index(s, path.step)
    if not path.start <= j_s <= path.start + path.n - 1:
        need_lo = min(path.t_min, s)
        need_hi = max(path.t_max, s)
        raise GridError(
            f"shift by {s} leaves the sampled window [{path.t_min}, {path.t_max}]; "
            f"enlarge it to [{need_lo}, {need_hi}]"
        )
    if j_s == 0:
        return path
    values = path.values - path.values[j_s - path.start]
    return WienerPath(
        seed=path.seed,
        step=path.step,
        start=path.start - j_s,
        values=values,
        origin=path.origin + j_s,
    )


@dataclass(frozen=True)
class OUParams:
    """Coefficients of ``dz + lam z dt = delta dW``."""

    lam: float
    delta: float

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("OU decay rate must be positive")
        if not self.delta >= 0:
            raise ValueError("OU noise intensity must be non-negative")

    @property
    def variance(self) -> float:
        return self.delta**2 / (2.0 * self.lam)

    @classmethod
    def for_wave(cls, epsilon: float) -> "OUParams":
        """``eps^2 dz + z dt = dW`` rewritten as ``dz = -(1/eps^2) z dt + (1/eps^2) dW``."""
        r = 1.0 / epsilon**2
        return cls(lam=r, delta=r)


@dataclass(frozen=True, eq=False)
class OUPath:
    """Values of ``z(theta_t omega)`` on the grid of ``base``."""

    params: OUParams
    base: WienerPath
    values: np.ndarray
    method: str

    def __post_init__(self):
        object.__setattr__(self, "values", _readonly(self.values))
        if len(self.values) != self.base.n:
            raise GridError("OU values must share the Wiener grid")

    @property
    def step(self) -> float:
        return self.base.step

    @property
    def t_min(self) -> float:
        return self.base.t_min

    @property
    def t_max(self) -> float:
        return self.base.t_max

    @property
    def times(self) -> np.ndarray:
        return self.base.times

    def index(self, t: float) -> int:
        return self.base.index(t)

    def __call__(self, t):
        return _interp(self.base, self.values, t)

    @cached_property
    def cumulative(self) -> np.ndarray:
        """Trapezoidal ``int_0^{t_j} z dr`` at every grid point."""
        z = self.values
        c = np.zeros_like(z)
        c[1:] = np.cumsum(0.5 * self.step * (z[1:] + z[:-1]))
        return _readonly(c - c[-self.base.start])

    def shift(self, s: float) -> "OUPath":
        """``z(theta_t theta_s omega) = z(theta_{t+s} omega)``: a relabelling of times."""
        return OUPath(self.params, shift(self.base, s), self.values, self.method)

    def sample(self, t0: float, n: int, stride: int) -> np.ndarray:
        """``n`` grid values starting at ``t0`` with the given index stride."""
        j0 = self.index(t0)
        last = j0 + (n - 1) * stride
        if last >= self.base.n or j0 < 0:
            raise GridError("requested samples leave the window")
        return self.values[j0:last + 1:stride]


def stationary_z(
    path: WienerPath,
    params: OUParams,
    method: str = "recursion",
    *,
    tail_tol: float = 1e-8,
    valid_from: float = 0.0,
    aux_seed: int | None = None,
) -> OUPath:
    """Stationary OU solution driven by ``path``.

    ``recursion`` uses the exact AR(1) transition with a stationary draw at
    ``t_min``; ``formula`` evaluates the convolution of the path against the
    exponential kernel by the trapezoid rule, truncated at ``t_min``.
    """
    lam, delta, dt = params.lam, params.delta, path.step
    if delta == 0.0:
        return OUPath(params, path, np.zeros(path.n), method)
    a = math.exp(-lam * dt)
    if method == "recursion":
        if aux_seed is None:
            key = [abs(int(path.seed)), 0x5EED, abs(path.start + path.origin)]
        else:
            key = [abs(int(aux_seed))]
        z0 = np.random.default_rng(key).standard_normal() * math.sqrt(params.variance)
        scale = delta * math.sqrt(-math.expm1(-2.0 * lam * dt) / (2.0 * lam * dt))
        x = np.empty(path.n)
        x[0] = z0
        x[1:] = scale * np.diff(path.values)
        z = lfilter([1.0], [1.0, -a], x)
    elif method == "formula":
        need = math.log(1.0 / tail_tol) / lam
        if valid_from - path.t_min < need:
            t_req = math.floor((valid_from - need) / dt) * dt
            raise GridError(
                f"window too short for tail_tol={tail_tol}: need t_min <= {t_req}"
            )
        w = path.values - path.values[0]
        x = np.zeros(path.n)
        x[1:] = 0.5 * dt * (a * w[:-1] + w[1:])
        conv = lfilter([1.0], [1.0, -a], x)
        z = delta * (w - lam * conv)
    else:
        raise ValueError(f"unknown method {method!r}")
    return OUPath(params, path, z, method)


def constant_z(path: WienerPath, value: float, params: OUParams | None = None) -> OUPath:
    """An injected constant ``z`` on the grid of ``path`` (test helper)."""
    params = params or OUParams(1.0, 0.0)
    return OUPath(params, path, np.full(path.n, float(value)), "constant")


def integral_of_z(z: OUPath, s: float, t: float) -> float:
    """Trapezoidal ``int_s^t z(theta_r omega) dr`` (exact for the linear interpolant)."""
    return _cum_at(z, t) - _cum_at(z, s)


def _cum_at(z: OUPath, t: float) -> float:
    base = z.base
    tol = _ALIGN_RTOL * base.step
    if t < base.t_min - tol or t > base.t_max + tol:
        raise GridError(f"limit {t} outside window [{base.t_min}, {base.t_max}]")
    q = (t - base.t_min) / base.step
    j = min(int(math.floor(q + _ALIGN_RTOL)), base.n - 1)
    frac = (q - j) * base.step
    if frac <= tol:
        return float(z.cumulative[j])
    zt = z.values[j] + (z.values[j + 1] - z.values[j]) * frac / base.step
    return float(z.cumulative[j] + 0.5 * frac * (z.values[j] + zt))


@dataclass(frozen=True)
class ErgodicStats:
    horizon: float
    mean: float
    abs_mean: float
    growth: float


def ergodic_stats(z: OUPath, horizons: Iterable[float]) -> list[ErgodicStats]:
    """Time means of ``z`` and ``|z|`` and the growth ratio ``max |z(tau)|/(1+|tau|)``."""
    out = []
    j0 = z.index(0.0)
    absz = np.abs(z.values)
    dt = z.step
    for t in horizons:
        if t == 0:
            raise ValueError("horizon must be non-zero")
        j = z.index(t)
        lo, hi = sorted((j0, j))
        seg = absz[lo:hi + 1]
        abs_int = 0.5 * dt * float(np.sum(seg[1:] + seg[:-1]))
        tau = np.abs(z.times[lo:hi + 1])
        out.append(
            ErgodicStats(
                horizon=float(t),
                mean=integral_of_z(z, 0.0, t) / t,
                abs_mean=abs_int / abs(t),
                growth=float(np.max(seg / (1.0 + tau))),
            )
        )
    return out


def write_paths_csv(dest, z: OUPath) -> None:
    """Write ``t, omega, z`` with 17 significant digits."""
    with open(dest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "omega", "z"])
        for t, om, zz in zip(z.times, z.base.values, z.values):
            w.writerow([f"{t:.17g}", f"{om:.17g}", f"{zz:.17g}"])


def read_paths_csv(src) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    data = np.loadtxt(src, delimiter=",", skiprows=1, ndmin=2)
    with open(src) as fh:
        header = fh.readline().strip().split(",")
    if header != ["t", "omega", "z"]:
        raise ValueError(f"unexpected header {header}")
    return data[:, 0], data[:, 1], data[:, 2]
