"""Time integration of the random evolution equations and the conjugacies.

Two modes share one exponential integrator:

* ``wave``: ``U' = AU + F(theta_t omega, U)`` with ``F = (delta phi z, eps^-2 f(u))``;
* ``multiplicative``: ``u' = Au + z(theta_t omega) u + G(theta_t omega, u)`` with
  ``G(omega, u) = e^{-z} F0(u e^{z})`` and ``F0 = (0, eps^-2 f(u))``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import expm

from .noise import OUPath, WienerPath, _grid_index
from .spectral import (
    StateE,
    WaveSpec,
    eigen_data,
    mode_exponentials,
    nonlinear_modes,
    norm_E,
)

__all__ = [
    "Trajectory",
    "integrate",
    "integrate_array",
    "nonlinearity",
    "conjugate_additive",
    "conjugate_multiplicative",
    "integrate_wave_em",
    "write_trajectory_csv",
]

MODES = ("wave", "multiplicative")
SCHEMES = ("lawson", "etd")
OVERFLOW_BOUND = 1e12


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (T+1, ..., M, 2)
    mode: str
    scheme: str
    z: OUPath | None = None

    def state(self, i: int) -> StateE:
        return StateE.from_array(self.states[i])

    def at(self, t: float) -> StateE:
        i = int(round((t - self.times[0]) / (self.times[1] - self.times[0])))
        if not math.isclose(self.times[i], t, rel_tol=1e-9, abs_tol=1e-12):
            raise ValueError(f"{t} is not a trajectory time")
        return self.state(i)

    @property
    def final(self) -> StateE:
        return self.state(-1)


def nonlinearity(x: np.ndarray, z_value, spec: WaveSpec, mode: str = "wave") -> np.ndarray:
    """``F(theta_t omega, U)`` (wave mode) or ``G(theta_t omega, u)`` (multiplicative mode)."""
    z_value = np.asarray(z_value, dtype=float)
    out = np.empty_like(x)
    if mode == "wave":
        out[..., 0] = spec.delta * z_value[..., None] * spec.phi
        out[..., 1] = nonlinear_modes(x[..., 0], spec) / spec.epsilon**2
    elif mode == "multiplicative":
        ez = np.exp(z_value)[..., None]
        out[..., 0] = 0.0
        out[..., 1] = nonlinear_modes(x[..., 0] * ez, spec) / (ez * spec.epsilon**2)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return out


@lru_cache(maxsize=32)
def _step_matrices(spec: WaveSpec, dt: float, scheme: str):
    Phi = mode_exponentials(spec, dt)
    if scheme == "lawson":
        return Phi, dt * Phi
    if scheme != "etd":
        raise ValueError(f"unknown scheme {scheme!r}")
    ev = eigen_data(spec)
    W = np.empty_like(Phi)
    for i, A in enumerate(ev.blocks):
        Z = np.zeros((4, 4))
        Z[:2, :2] = A * dt
        Z[:2, 2:] = np.eye(2)
        W[i] = dt * expm(Z)[:2, 2:]
    return Phi, W


def _noise_samples(z: OUPath, t0: float, n: int, dt: float):
    stride = _grid_index(dt, z.step)
    if stride < 1:
        raise ValueError("integration step must be a positive multiple of the noise step")
    fine = z.sample(t0, n * stride + 1, 1)
    left = fine[::stride][:-1]
    pair = 0.5 * z.step * (fine[1:] + fine[:-1])
    zeta = pair.reshape(n, stride).sum(axis=1)
    return left, zeta


def integrate_array(
    x0: np.ndarray,
    z: OUPath,
    t0: float,
    t1: float,
    step: float,
    spec: WaveSpec,
    *,
    mode: str = "wave",
    scheme: str = "lawson",
    overflow_bound: float = OVERFLOW_BOUND,
) -> np.ndarray:
    """Array version of :func:`integrate`; ``x0`` is ``(M, 2)`` or a batch ``(B, M, 2)``."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    n = _grid_index(t1 - t0, step)
    if n <= 0:
        raise ValueError("need t0 < t1")
    _grid_index(t0, z.step)
    zl, zeta = _noise_samples(z, t0, n, step)
    Phi, W = _step_matrices(spec, step, scheme)
    out = np.empty((n + 1,) + np.shape(x0))
    x = np.array(x0, dtype=float)
    out[0] = x
    mult = mode == "multiplicative"
    for i in range(n):
        Fx = nonlinearity(x, zl[i], spec, mode)
        x = np.einsum("kij,...kj->...ki", Phi, x) + np.einsum("kij,...kj->...ki", W, Fx)
        if mult:
            x = x * math.exp(zeta[i])
        nrm = np.max(norm_E(x, spec))
        if not nrm <= overflow_bound:
            raise FloatingPointError(
                f"blow-up at step {i + 1} (t={t0 + (i + 1) * step:.6g}): |U|_E={nrm:.3g}"
            )
        out[i + 1] = x
    return out


def integrate(
    U0: StateE,
    z: OUPath,
    t0: float,
    t1: float,
    step: float,
    spec: WaveSpec,
    *,
    mode: str = "wave",
    scheme: str = "lawson",
    overflow_bound: float = OVERFLOW_BOUND,
) -> Trajectory:
    """Exponential Euler on ``[t0, t1]``.

    ``lawson``: ``U_{n+1} = e^{A dt} e^{zeta_n} (U_n + dt N_n)``;
    ``etd``: ``U_{n+1} = e^{zeta_n} (e^{A dt} U_n + dt phi1(A dt) N_n)``,
    with ``N_n`` the nonlinearity at the left endpoint and ``zeta_n`` the
    trapezoidal integral of ``z`` over the step (multiplicative mode only).
    """
    states = integrate_array(
        U0.as_array(), z, t0, t1, step, spec,
        mode=mode, scheme=scheme, overflow_bound=overflow_bound,
    )
    times = t0 + step * np.arange(states.shape[0])
    return Trajectory(times, states, mode, scheme, z)


def conjugate_additive(U: StateE, z_value: float, spec: WaveSpec, direction: str = "forward") -> StateE:
    """``T(omega, U) = U - (0, delta phi z)`` and its inverse."""
    off = StateE(np.zeros(spec.M), spec.delta * z_value * spec.phi)
    if direction == "forward":
        return U - off
    if direction == "inverse":
        return U + off
    raise ValueError(f"unknown direction {direction!r}")


def conjugate_multiplicative(u: StateE, z_value: float, direction: str = "forward") -> StateE:
    """``T(omega, u) = u e^{-z}`` and its inverse."""
    e = -z_value if direction == "forward" else z_value
    if direction not in ("forward", "inverse"):
        raise ValueError(f"unknown direction {direction!r}")
    if abs(e) > 700.0:
        raise OverflowError(f"exponent {e} outside the floating-point range")
    return u * math.exp(e)


def integrate_wave_em(
    u0: np.ndarray,
    v0: np.ndarray,
    W: WienerPath,
    t0: float,
    t1: float,
    step: float,
    spec: WaveSpec,
) -> np.ndarray:
    """Euler-Maruyama for the original second-order equation (modal ``u``, ``u_t``).

    Only used as an independent cross-check of the conjugated random system.
    """
    n = _grid_index(t1 - t0, step)
    stride = _grid_index(step, W.step)
    j0 = W.index(t0)
    inc = np.diff(W.values[j0:j0 + n * stride + 1:stride])
    eps2 = spec.epsilon**2
    k2 = eigen_data(spec).k ** 2
    phi = spec.phi
    u, v = np.array(u0, float), np.array(v0, float)
    out = np.empty((n + 1, spec.M, 2))
    out[0, :, 0], out[0, :, 1] = u, v
    for i in range(n):
        fu = nonlinear_modes(u, spec)
        u, v = (
            u + step * v,
            v + step * (-v - k2 * u + fu) / eps2 + spec.delta * phi * inc[i] / eps2,
        )
        out[i + 1, :, 0], out[i + 1, :, 1] = u, v
    return out


def write_trajectory_csv(dest, traj: Trajectory, thin: int = 1) -> None:
    states = traj.states
    if states.ndim != 3:
        raise ValueError("CSV export expects a single trajectory")
    M = states.shape[1]
    with open(dest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"u_{k}" for k in range(1, M + 1)] + [f"v_{k}" for k in range(1, M + 1)])
        for i in range(0, len(traj.times), max(1, thin)):
            row = [traj.times[i], *states[i, :, 0], *states[i, :, 1]]
            w.writerow([f"{x:.17g}" for x in row])
