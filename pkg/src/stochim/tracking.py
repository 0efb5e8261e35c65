"""Exponential tracking: for a state ``x`` find ``x_bar`` on the manifold whose orbit shadows it.

With ``u`` the orbit of ``x`` on ``[0, T_f]`` and ``w = u_bar - u`` the unknown,
``w`` is the fixed point of::

    w(t) = e^{At+Z(t)} Q w(0) + int_0^t e^{A(t-s)+Z(t)-Z(s)} Q Ft(s, w(s)) ds
                              + int_{T_f}^t e^{A(t-s)+Z(t)-Z(s)} P Ft(s, w(s)) ds
    Q w(0) = -Q u(0) + h(P u(0) + P w(0), omega)

where ``Ft(s, w) = G(s, u(s) + w) - G(s, u(s))``. The iteration runs in the sup
norm weighted by ``e^{-eta t - Z(t)}`` on ``[0, T_f]``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .noise import OUPath, _grid_index
from .perron import (
    ConvergenceError,
    GapError,
    LPParams,
    _propagator,
    check_gap,
    solve_backward,
)
from .rds import integrate_array
from .spectral import StateE, WaveSpec, nonlinear_diff_modes, norm_E, p_coords, project_Q

H_CACHE_DIGITS = 10
FIT_SKIP = 0.05


@dataclass(frozen=True, eq=False)
class EtaWeightedNorm:
    """``sup_t e^{-eta t - Z(t)} |w(t)|_E`` on a fixed grid."""

    eta: float
    times: np.ndarray
    z_integrals: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        return np.exp(-self.eta * self.times - self.z_integrals)

    def __call__(self, w: np.ndarray, spec: WaveSpec) -> float:
        return float(np.max(norm_E(self.weights[:, None, None] * w, spec)))


def nonlinear_difference(u: np.ndarray, w: np.ndarray, zs: np.ndarray, spec: WaveSpec, mode: str) -> np.ndarray:
    """``G(u + w) - G(u)`` (``F`` in wave mode, where the additive term cancels)."""
    out = np.zeros_like(w)
    if mode == "wave":
        out[..., 1] = nonlinear_diff_modes(u[..., 0], w[..., 0], spec) / spec.epsilon**2
    elif mode == "multiplicative":
        ez = np.exp(zs)[:, None]
        out[..., 1] = nonlinear_diff_modes(u[..., 0] * ez, w[..., 0] * ez, spec) / (ez * spec.epsilon**2)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return out


@dataclass(eq=False)
class TrackingResult:
    x: StateE
    x_bar: StateE
    times: np.ndarray
    w: np.ndarray
    ratios: list
    diffs: list
    iterations: int
    residual: float
    T_f: float
    tol: float
    h_evaluations: int = 0
    fitted_rate: float | None = None
    c1_estimate: float | None = None
    coincident: bool = False
    difference: np.ndarray | None = field(default=None, repr=False)

    @property
    def w_trajectory(self) -> np.ndarray:
        return self.w


class _HCache:
    """``h`` at P-coordinates rounded to ``H_CACHE_DIGITS``, warm-started from the last solve."""

    def __init__(self, z, spec, params):
        self.z, self.spec, self.params = z, spec, params
        self.store: dict = {}
        self.last = None
        self.calls = 0

    def __call__(self, xi: np.ndarray) -> np.ndarray:
        key = tuple(np.round(xi, H_CACHE_DIGITS))
        if key in self.store:
            return self.store[key]
        sol = solve_backward(np.array(key), self.z, self.spec, self.params, u_init=self.last)
        self.calls += 1
        self.last = sol.states
        h = project_Q(sol.states[-1], self.spec)
        self.store[key] = h
        return h


def default_T_f(spec: WaveSpec, tol: float, step: float) -> float:
    gap = check_gap(spec)
    T = math.log(1.0 / tol) / (gap.alpha - gap.eta)
    return math.ceil(T / step - 1e-9) * step


def solve_tracking_point(
    x: StateE,
    z: OUPath,
    lp_params: LPParams,
    spec: WaveSpec,
    *,
    T_f: float | None = None,
    tol: float = 1e-8,
    max_iter: int = 200,
    tol_h: float | None = None,
    require_gap1: bool = True,
) -> TrackingResult:
    """Forward fixed point for ``w``; returns ``x_bar = x + w(0)``.

    The orbit of ``x`` uses the ``etd`` scheme, whose one-step weights are the
    exact quadrature of the fixed-point map, so tracking holds at the discrete
    level. ``h`` is evaluated to ``tol_h`` (default ``tol/100``).
    """
    gap = check_gap(spec)
    if require_gap1 and not gap.pass_gap1:
        raise GapError(f"strengthened gap condition fails (lhs = {gap.lhs_gap1:.4f} >= 1)")
    step, mode = lp_params.step, lp_params.mode
    T_f = default_T_f(spec, tol, step) if T_f is None else _grid_index(T_f, step) * step
    n = _grid_index(T_f, step)
    stride = _grid_index(step, z.step)
    times = step * np.arange(n + 1)
    zs = z.sample(0.0, n + 1, stride)
    if mode == "multiplicative":
        j0 = z.index(0.0)
        Z = np.asarray(z.cumulative[j0:j0 + n * stride + 1:stride])
    else:
        Z = np.zeros(n + 1)
    eZ = np.exp(Z)[:, None, None]
    wnorm = EtaWeightedNorm(gap.eta, times, Z)

    u = integrate_array(x.as_array(), z, 0.0, T_f, step, spec, mode=mode, scheme="etd")
    prop = _propagator(spec, step, lp_params.quadrature)
    hparams = lp_params.replace(tol=tol * 0.01 if tol_h is None else tol_h)
    h_of = _HCache(z, spec, hparams)
    Pu0 = p_coords(u[0], spec)
    Qu0 = project_Q(u[0], spec)
    q_mask, p_mask = ~prop.p_mask, prop.p_mask
    zeroT = np.zeros((spec.M, 2), dtype=prop.dtype)

    w = np.zeros_like(u)
    ratios, diffs = [], []
    for it in range(1, max_iter + 1):
        Ft = nonlinear_difference(u, w, zs, spec, mode) / eZ
        b = prop.forcing(prop.to_coords(Ft))
        cp = prop.backward(b, zeroT, p_mask)
        p0 = cp[0, : spec.N, 0].real
        Qw0 = -Qu0 + h_of(Pu0 + p0)
        c0 = prop.to_coords(Qw0)
        c0[p_mask] = 0.0
        cq = prop.forward(b, c0, q_mask)
        new = prop.from_coords(cp + cq) * eZ
        d = wnorm(new - w, spec)
        if not math.isfinite(d):
            raise FloatingPointError(f"non-finite tracking iterate at iteration {it}")
        if diffs and diffs[-1] > 0:
            ratios.append(d / diffs[-1])
        diffs.append(d)
        w = new
        if d <= tol:
            x_bar = StateE.from_array(x.as_array() + w[0])
            return TrackingResult(
                x, x_bar, times, w, ratios, diffs, it, d, T_f, tol, h_of.calls
            )
    raise ConvergenceError(
        f"tracking did not converge in {max_iter} iterations "
        f"(last ratio {ratios[-1] if ratios else float('nan'):.4f})",
        ratios,
    )


def measure_rate(
    result: TrackingResult,
    z: OUPath,
    spec: WaveSpec,
    *,
    step: float | None = None,
    mode: str = "wave",
    skip: float = FIT_SKIP,
) -> tuple[float | None, float | None]:
    """Fit ``log |phi(t,x_bar) - phi(t,x)|_E`` against ``t``.

    The window drops the first ``skip`` fraction of ``[0, T_f]`` and keeps
    points where the difference stays ten times above the accuracy of
    ``x_bar``, i.e. the final iterate change or roundoff in ``|x|_E``.
    Returns ``(rate, c1)`` or ``(None, None)`` when the start is already on
    the manifold. ``c1`` is normalised so that ``diff(t) ~ c1 e^{rate t} diff(0)``.
    """
    step = step or (result.times[1] - result.times[0])
    T_f = result.T_f
    both = np.stack([result.x.as_array(), result.x_bar.as_array()])
    orbits = integrate_array(both, z, 0.0, T_f, step, spec, mode=mode, scheme="etd")
    diff = norm_E(orbits[:, 1] - orbits[:, 0], spec)
    times = step * np.arange(len(diff))
    result.difference = np.stack([times, diff], axis=1)
    d0 = diff[0]
    if d0 <= 10 * result.tol:
        result.coincident = True
        result.fitted_rate = result.c1_estimate = None
        return None, None
    # errors in x_bar along slow P-modes barely decay, so the floor is flat
    floor = 10 * max(result.residual, np.finfo(float).eps * float(norm_E(both[0], spec)))
    keep = (times >= skip * T_f) & (diff > floor)
    if keep.sum() < 3:
        result.fitted_rate = result.c1_estimate = None
        return None, None
    slope, icpt = np.polyfit(times[keep], np.log(diff[keep]), 1)
    result.fitted_rate = float(slope)
    result.c1_estimate = float(math.exp(icpt) / d0)
    return result.fitted_rate, result.c1_estimate


def write_tracking(result: TrackingResult, stem) -> tuple[Path, Path]:
    """Metadata JSON plus a ``t, difference`` CSV."""
    stem = Path(stem)
    meta = {
        "x_u": result.x.u_modes.tolist(),
        "x_v": result.x.v_modes.tolist(),
        "x_bar_u": result.x_bar.u_modes.tolist(),
        "x_bar_v": result.x_bar.v_modes.tolist(),
        "T_f": result.T_f,
        "tol": result.tol,
        "iterations": result.iterations,
        "ratios": result.ratios,
        "residual": result.residual,
        "fitted_rate": result.fitted_rate,
        "c1_estimate": result.c1_estimate,
        "coincident": result.coincident,
        "h_evaluations": result.h_evaluations,
    }
    jp, cp = stem.with_suffix(".json"), stem.with_suffix(".csv")
    jp.write_text(json.dumps(meta, indent=2))
    with open(cp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "difference"])
        if result.difference is not None:
            for t, d in result.difference:
                w.writerow([f"{t:.17g}", f"{d:.17g}"])
    return jp, cp
