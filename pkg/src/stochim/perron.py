"""Lyapunov-Perron construction of the random inertial manifold.

The backward fixed point on ``[-T_back, 0]``::

    u(t) = e^{At+Z(t)} xi + int_0^t e^{A(t-s)+Z(t)-Z(s)} P F(s, u(s)) ds
                         + int_{-T_back}^t e^{A(t-s)+Z(t)-Z(s)} Q F(s, u(s)) ds

with ``Z(t) = int_0^t z``, iterated in the sup norm weighted by
``e^{-eta t - Z(t)}``. ``Z`` vanishes in wave mode, where the noise enters only
through ``F``. The manifold map is ``h(xi, omega) = Q u(0)``.
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from itertools import combinations
from pathlib import Path

import numpy as np

from .noise import GridError, OUPath, _grid_index
from .propagator import ModalPropagator
from .rds import nonlinearity
from .spectral import (
    StateE,
    WaveSpec,
    dump_spec,
    eigen_data,
    from_p_coords,
    norm_E,
    p_coords,
    parse_spec,
    project_Q,
)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 200
EXP_GUARD = 700.0


class GapError(RuntimeError):
    """The spectral gap condition required by a construction does not hold."""


class ConvergenceError(RuntimeError):
    def __init__(self, msg: str, ratios=()):
        super().__init__(msg)
        self.ratios = list(ratios)


# ---------------------------------------------------------------------------
# gap certificates


@dataclass(frozen=True)
class GapReport:
    alpha: float
    beta: float
    eta: float
    K: float
    lipF: float
    lhs_gap: float
    lip_h_bound: float
    lip_h: float
    lhs_gap1: float
    pass_gap: bool
    pass_gap1: bool

    def as_dict(self) -> dict:
        return asdict(self)


def check_gap(spec: WaveSpec, lip_h: float | None = None) -> GapReport:
    """Evaluate both gap conditions; ``lip_h`` defaults to the analytic bound."""
    ev = eigen_data(spec)
    alpha, beta = ev.alpha, ev.beta
    eta = 0.5 * (alpha + beta)
    K = 1.0
    lipF = 3.0 * spec.lip_f
    lhs = K * lipF * (1.0 / (alpha - eta) + 1.0 / (eta - beta))
    bound = (K * lipF / (alpha - eta)) / (1.0 - lhs) if lhs < 1.0 else math.inf
    lh = bound if lip_h is None else float(lip_h)
    lhs1 = lhs + K**2 * lh * lipF / (alpha - eta) if lipF > 0 else lhs
    return GapReport(alpha, beta, eta, K, lipF, lhs, bound, lh, lhs1, lhs < 1.0, lhs1 < 1.0)


# ---------------------------------------------------------------------------
# numerics


@dataclass(frozen=True)
class LPParams:
    """Discretisation of the fixed-point problem; ``T_back=None`` picks the certified default."""

    step: float
    T_back: float | None = None
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    quadrature: str = "exact"
    mode: str = "wave"
    require_gap: bool = True

    def __post_init__(self):
        if not (self.step > 0 and self.tol > 0 and self.max_iter >= 1):
            raise ValueError("step, tol and max_iter must be positive")
        if self.T_back is not None and self.T_back <= 0:
            raise ValueError("T_back must be positive")

    def horizon(self, spec: WaveSpec) -> float:
        if self.T_back is not None:
            return _grid_index(self.T_back, self.step) * self.step
        return default_T_back(spec, self.tol, self.step)

    def replace(self, **kw) -> "LPParams":
        d = asdict(self)
        d.update(kw)
        return LPParams(**d)


def default_T_back(spec: WaveSpec, tol: float, step: float) -> float:
    ev = eigen_data(spec)
    alpha, beta = ev.alpha, ev.beta
    eta = 0.5 * (alpha + beta)
    L = math.log(1.0 / tol)
    T = max(L / (eta - beta), 5.0 / (alpha - beta) * L)
    return math.ceil(T / step - 1e-9) * step


@lru_cache(maxsize=16)
def _propagator(spec: WaveSpec, step: float, quadrature: str) -> ModalPropagator:
    return ModalPropagator(spec, step, quadrature)


@dataclass(frozen=True, eq=False)
class BackwardSolution:
    xi: np.ndarray
    times: np.ndarray
    states: np.ndarray
    ratios: list
    diffs: list
    iterations: int
    T_back: float
    spec: WaveSpec

    @property
    def u0(self) -> StateE:
        return StateE.from_array(self.states[-1])

    @property
    def h(self) -> np.ndarray:
        return project_Q(self.states[-1], self.spec)


def _weights(eta: float, times: np.ndarray, Z: np.ndarray) -> np.ndarray:
    return np.exp(-eta * times - Z)


def _backward_grid(z: OUPath, spec: WaveSpec, params: LPParams):
    T_back = params.horizon(spec)
    n = _grid_index(T_back, params.step)
    alpha = eigen_data(spec).alpha
    if abs(alpha) * T_back > EXP_GUARD:
        raise FloatingPointError(
            f"|alpha| T_back = {abs(alpha) * T_back:.1f} exceeds the exponent guard"
        )
    stride = _grid_index(params.step, z.step)
    if stride < 1:
        raise GridError("step must be a positive multiple of the noise step")
    t0 = -n * params.step
    if z.t_min > t0 + 1e-12 or z.t_max < -1e-12:
        raise GridError(f"noise window must cover [{t0}, 0]; has [{z.t_min}, {z.t_max}]")
    zs = z.sample(t0, n + 1, stride)
    times = t0 + params.step * np.arange(n + 1)
    if params.mode == "multiplicative":
        j0 = z.index(t0)
        Z = np.asarray(z.cumulative[j0:j0 + n * stride + 1:stride])
    else:
        Z = np.zeros(n + 1)
    return times, zs, Z, T_back


def solve_backward(
    xi,
    z: OUPath,
    spec: WaveSpec,
    params: LPParams,
    *,
    u_init: np.ndarray | None = None,
) -> BackwardSolution:
    """Fixed point of the backward map through the point with P-coordinates ``xi``."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (spec.N,):
        raise ValueError(f"expected {spec.N} P-coordinates")
    gap = check_gap(spec)
    if params.require_gap and not gap.pass_gap:
        raise GapError(f"gap condition fails (lhs = {gap.lhs_gap:.4f} >= 1)")
    times, zs, Z, T_back = _backward_grid(z, spec, params)
    prop = _propagator(spec, params.step, params.quadrature)
    n = len(times) - 1
    eZ = np.exp(Z)[:, None, None]
    w = _weights(gap.eta, times, Z)

    cT = np.zeros((spec.M, 2), dtype=prop.dtype)
    cT[: spec.N, 0] = xi
    zero_b = np.zeros((n, spec.M, 2), dtype=prop.dtype)
    free = prop.from_coords(prop.backward(zero_b, cT, prop.p_mask)) * eZ
    if u_init is None:
        u = free
    else:
        u = np.array(u_init, dtype=float)
        if u.shape != free.shape:
            raise ValueError("warm start has the wrong shape")
    q_mask = ~prop.p_mask
    ratios, diffs = [], []
    linear = spec.is_linear_zero and spec.delta == 0.0
    for it in range(1, params.max_iter + 1):
        if linear and u_init is None:
            return BackwardSolution(xi, times, free, ratios, [0.0], it, T_back, spec)
        Fx = nonlinearity(u, zs, spec, params.mode) / eZ
        b = prop.forcing(prop.to_coords(Fx))
        c = prop.forward(b, np.zeros_like(cT), q_mask) + prop.backward(b, cT, prop.p_mask)
        new = prop.from_coords(c) * eZ
        d = float(np.max(norm_E(w[:, None, None] * (new - u), spec)))
        if not math.isfinite(d):
            raise FloatingPointError(f"non-finite iterate at iteration {it}")
        if diffs and diffs[-1] > 0:
            ratios.append(d / diffs[-1])
        diffs.append(d)
        u = new
        if d <= params.tol:
            return BackwardSolution(xi, times, u, ratios, diffs, it, T_back, spec)
    last = ratios[-1] if ratios else float("nan")
    raise ConvergenceError(
        f"no convergence in {params.max_iter} iterations (last ratio {last:.4f}, change {diffs[-1]:.3g})",
        ratios,
    )


def h_integral(sol: BackwardSolution, z: OUPath, spec: WaveSpec, params: LPParams) -> np.ndarray:
    """``int_{-T}^0 e^{-As+Z(0)-Z(s)} Q F(s, u(s)) ds`` evaluated on a converged trajectory."""
    times, zs, Z, _ = _backward_grid(z, spec, params)
    prop = _propagator(spec, params.step, params.quadrature)
    eZ = np.exp(Z)[:, None, None]
    Fx = nonlinearity(sol.states, zs, spec, params.mode) / eZ
    b = prop.forcing(prop.to_coords(Fx))
    n = b.shape[0]
    kern = prop.powers(np.arange(n - 1, -1, -1))
    cq = np.einsum("nkj,nkj->kj", kern, b)
    cq[prop.p_mask] = 0.0
    return prop.from_coords(cq)


def evaluate_h(xi, z: OUPath, spec: WaveSpec, params: LPParams, **kw) -> StateE:
    """``h(xi, omega)`` as the Q-part at time 0 of the backward fixed point."""
    sol = solve_backward(xi, z, spec, params, **kw)
    return StateE.from_array(project_Q(sol.states[-1], spec))


def graph_distance(U: StateE, z: OUPath, spec: WaveSpec, params: LPParams) -> float:
    """``|QU - h(PU, omega)|_E``."""
    x = U.as_array()
    h = evaluate_h(p_coords(x, spec), z, spec, params)
    return float(norm_E(project_Q(x, spec) - h.as_array(), spec))


# ---------------------------------------------------------------------------
# xi grids (in E-normalised e_k^+ coordinates)


def p_state(xi, spec: WaveSpec) -> np.ndarray:
    return from_p_coords(xi, spec).as_array()


def xi_tensor_grid(spec: WaveSpec, points: int = 5, R: float = 1.0) -> np.ndarray:
    """Tensor grid on ``[-R, R]^N`` in E-normalised coordinates, restricted to ``|xi|_E <= R``.

    Rows are raw P-coordinates (coefficients of ``e_k^+``).
    """
    axis = np.linspace(-R, R, points)
    mesh = np.stack(np.meshgrid(*([axis] * spec.N), indexing="ij"), axis=-1).reshape(-1, spec.N)
    keep = np.linalg.norm(mesh, axis=1) <= R * (1 + 1e-12)
    return mesh[keep] / eigen_data(spec).e_plus_norms


def xi_random_ball(spec: WaveSpec, n: int, R: float = 1.0, seed: int = 0) -> np.ndarray:
    """``n`` points uniform in the E-ball of radius ``R`` in PE (raw P-coordinates)."""
    rng = np.random.default_rng([seed, 0xB411])
    g = rng.standard_normal((n, spec.N))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    r = R * rng.random(n) ** (1.0 / spec.N)
    return (g * r[:, None]) / eigen_data(spec).e_plus_norms


def xi_norm_E(xi, spec: WaveSpec) -> np.ndarray:
    return np.linalg.norm(np.asarray(xi) * eigen_data(spec).e_plus_norms, axis=-1)


# ---------------------------------------------------------------------------
# charts


@dataclass(eq=False)
class ManifoldChart:
    omega_seed: int
    spec: WaveSpec
    xi_grid: np.ndarray
    h_values: np.ndarray
    T_back: float
    step: float
    tol: float
    contraction_observed: float
    radius: float
    residuals: np.ndarray
    iterations: np.ndarray
    quadrature: str = "exact"
    mode: str = "wave"
    failures: list = field(default_factory=list)

    @property
    def partial(self) -> bool:
        return bool(self.failures)

    def __len__(self) -> int:
        return len(self.xi_grid)

    def points(self) -> np.ndarray:
        """Chart points ``xi + h(xi)`` as modal arrays, shape (n, M, 2)."""
        return np.array([p_state(x, self.spec) for x in self.xi_grid]).reshape(
            -1, self.spec.M, 2
        ) + self.h_values


def _chart_point(args):
    xi, z, spec, params = args
    try:
        sol = solve_backward(xi, z, spec, params)
    except (ConvergenceError, FloatingPointError) as exc:
        return None, str(exc)
    h = project_Q(sol.states[-1], spec)
    ratio = max(sol.ratios) if sol.ratios else 0.0
    return (h, ratio, sol.diffs[-1], sol.iterations), None


def build_chart(
    xi_grid,
    z: OUPath,
    spec: WaveSpec,
    params: LPParams,
    *,
    R: float | None = None,
    threads: int = 1,
) -> ManifoldChart:
    xi_grid = np.asarray(xi_grid, dtype=float).reshape(-1, spec.N)
    norms = xi_norm_E(xi_grid, spec)
    if R is None:
        R = float(norms.max()) if len(norms) else 0.0
    if np.any(norms > R * (1 + 1e-9)):
        raise ValueError("grid points outside the chart radius")
    T_back = params.horizon(spec)
    items = [(x, z, spec, params) for x in xi_grid]
    if threads > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_chart_point, items))
    else:
        results = [_chart_point(a) for a in items]
    keep, hs, ratios, res, its, failures = [], [], [], [], [], []
    for i, (r, err) in enumerate(results):
        if err is not None:
            failures.append({"index": i, "xi": xi_grid[i].tolist(), "error": err})
            continue
        keep.append(i)
        hs.append(r[0])
        ratios.append(r[1])
        res.append(r[2])
        its.append(r[3])
    return ManifoldChart(
        omega_seed=int(z.base.seed),
        spec=spec,
        xi_grid=xi_grid[keep],
        h_values=np.array(hs).reshape(-1, spec.M, 2),
        T_back=T_back,
        step=params.step,
        tol=params.tol,
        contraction_observed=max(ratios) if ratios else 0.0,
        radius=float(R),
        residuals=np.array(res),
        iterations=np.array(its, dtype=int),
        quadrature=params.quadrature,
        mode=params.mode,
        failures=failures,
    )


def estimate_lip_h(chart: ManifoldChart) -> float:
    if len(chart) < 2:
        raise ValueError("need at least two chart points")
    spec = chart.spec
    best = 0.0
    P = np.array([p_state(x, spec) for x in chart.xi_grid])
    for i, j in combinations(range(len(chart)), 2):
        dxi = norm_E(P[i] - P[j], spec)
        if dxi == 0:
            continue
        best = max(best, norm_E(chart.h_values[i] - chart.h_values[j], spec) / dxi)
    return float(best)


def save_chart(chart: ManifoldChart, stem) -> tuple[Path, Path]:
    """Write ``<stem>.json`` (metadata) and ``<stem>.csv`` (xi..., h_u..., h_v...)."""
    stem = Path(stem)
    meta = {
        "format": "manifold-chart/1",
        "omega_seed": chart.omega_seed,
        "spec": dump_spec(chart.spec),
        "n_points": len(chart),
        "T_back": chart.T_back,
        "step": chart.step,
        "tol": chart.tol,
        "quadrature": chart.quadrature,
        "mode": chart.mode,
        "radius": chart.radius,
        "contraction_observed": chart.contraction_observed,
        "residuals": chart.residuals.tolist(),
        "iterations": chart.iterations.tolist(),
        "failures": chart.failures,
    }
    jp, cp = stem.with_suffix(".json"), stem.with_suffix(".csv")
    jp.write_text(json.dumps(meta, indent=2))
    M, N = chart.spec.M, chart.spec.N
    with open(cp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            [f"xi_{k}" for k in range(1, N + 1)]
            + [f"h_u_{k}" for k in range(1, M + 1)]
            + [f"h_v_{k}" for k in range(1, M + 1)]
        )
        for xi, h in zip(chart.xi_grid, chart.h_values):
            w.writerow([f"{x:.17g}" for x in (*xi, *h[:, 0], *h[:, 1])])
    return jp, cp


def load_chart(stem, *, z: OUPath | None = None, recheck: int = 0) -> ManifoldChart:
    """Read a chart written by :func:`save_chart`.

    Stored residuals must not exceed the stored tolerance. With ``z`` given,
    the first ``recheck`` points are recomputed and must match within ``2 tol``.
    """
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    if meta.get("format") != "manifold-chart/1":
        raise ValueError("not a manifold chart")
    spec = parse_spec(meta["spec"])
    data = np.loadtxt(stem.with_suffix(".csv"), delimiter=",", skiprows=1, ndmin=2)
    n, N, M = meta["n_points"], spec.N, spec.M
    if n == 0:
        data = np.zeros((0, N + 2 * M))
    if data.shape != (n, N + 2 * M):
        raise ValueError(f"chart rows have shape {data.shape}, expected {(n, N + 2 * M)}")
    residuals = np.asarray(meta["residuals"], dtype=float)
    if len(residuals) != n or np.any(residuals > meta["tol"]):
        raise ValueError("stored residuals exceed the chart tolerance")
    xi = data[:, :N]
    h = np.stack([data[:, N:N + M], data[:, N + M:]], axis=-1)
    if np.any(xi_norm_E(xi, spec) > meta["radius"] * (1 + 1e-9)):
        raise ValueError("chart point outside the recorded radius")
    chart = ManifoldChart(
        meta["omega_seed"], spec, xi, h, meta["T_back"], meta["step"], meta["tol"],
        meta["contraction_observed"], meta["radius"], residuals,
        np.asarray(meta["iterations"], dtype=int), meta["quadrature"], meta["mode"],
        meta["failures"],
    )
    if z is not None and recheck:
        params = LPParams(chart.step, chart.T_back, chart.tol, quadrature=chart.quadrature,
                          mode=chart.mode, require_gap=False)
        for i in range(min(recheck, n)):
            hi = evaluate_h(xi[i], z, spec, params).as_array()
            if norm_E(hi - h[i], spec) > 2 * chart.tol:
                raise ValueError(f"chart point {i} fails the residual check")
    return chart
