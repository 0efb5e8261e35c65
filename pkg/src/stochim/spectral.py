"""Closed-form spectral machinery of the damped wave generator on (0, pi).

States are stored modally: ``u = sum_k u_k sin(kx)``, ``v = sum_k v_k sin(kx)``.
Array-valued routines take the modal pair as a trailing ``(M, 2)`` axis pair,
``x[..., k-1, 0] = u_k`` and ``x[..., k-1, 1] = v_k``.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Callable

import numpy as np

__all__ = [
    "SpecError",
    "WaveSpec",
    "StateE",
    "EigenData",
    "eigen_data",
    "inner_product_E",
    "norm_E",
    "project_P",
    "project_Q",
    "p_coords",
    "from_p_coords",
    "semigroup_apply",
    "mode_exponentials",
    "apply_F",
    "epsilon_lip",
    "norm_equivalence",
    "dump_spec",
    "parse_spec",
    "write_state_csv",
    "read_state_csv",
]

HALF_PI = 0.5 * math.pi

BUILTIN_NONLINEARITIES = ("zero", "sin", "tanh", "affine")


class SpecError(ValueError):
    """Invalid wave-equation setup."""


@dataclass(frozen=True)
class WaveSpec:
    epsilon: float
    M: int
    N: int
    G: int | None = None
    nonlinearity: str = "sin"
    c: float = 1.0
    lip_f: float | None = None
    phi_modes: tuple[float, ...] = (1.0,)
    delta: float = 0.0
    f: Callable[[np.ndarray], np.ndarray] | None = field(default=None, compare=False)

    def __post_init__(self):
        eps, M, N = self.epsilon, self.M, self.N
        if not eps > 0:
            raise SpecError("epsilon must be positive")
        if N < 1:
            raise SpecError("N must be at least 1")
        if not 1.0 / (2.0 * eps) > N + 1:
            raise SpecError(f"need 1/(2 eps) > N+1; got 1/(2*{eps}) <= {N + 1}")
        if M < N + 1:
            raise SpecError("need M >= N+1")
        if self.G is None:
            object.__setattr__(self, "G", 4 * M)
        if self.G < 2 * M:
            raise SpecError("need G >= 2M")
        if self.delta < 0:
            raise SpecError("delta must be non-negative")
        phi = tuple(float(p) for p in self.phi_modes)
        if len(phi) > M:
            raise SpecError("phi has more modes than M")
        object.__setattr__(self, "phi_modes", phi)
        kind = self.nonlinearity
        if kind == "custom":
            if self.f is None or self.lip_f is None:
                raise SpecError("custom nonlinearity needs f and a declared lip_f")
        elif kind in BUILTIN_NONLINEARITIES:
            analytic = 0.0 if kind == "zero" else abs(self.c)
            if self.lip_f is None:
                object.__setattr__(self, "lip_f", analytic)
            elif not math.isclose(self.lip_f, analytic, rel_tol=1e-12, abs_tol=1e-15):
                raise SpecError(f"lip_f={self.lip_f} differs from analytic {analytic} for {kind}")
        else:
            raise SpecError(f"unknown nonlinearity {kind!r}")
        if self.lip_f < 0:
            raise SpecError("lip_f must be non-negative")

    def replace(self, **kw) -> "WaveSpec":
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        if "c" in kw or "nonlinearity" in kw:
            d["lip_f"] = None if d["nonlinearity"] != "custom" else d["lip_f"]
        if "M" in kw and "G" not in kw:
            d["G"] = None
        d.update(kw)
        return WaveSpec(**d)

    @property
    def phi(self) -> np.ndarray:
        out = np.zeros(self.M)
        out[: len(self.phi_modes)] = self.phi_modes
        return out

    @property
    def is_linear_zero(self) -> bool:
        return self.nonlinearity == "zero" or (self.nonlinearity != "custom" and self.c == 0.0)

    # pointwise nonlinearity and a cancellation-free difference f(u+w) - f(u)
    def f_point(self, u: np.ndarray) -> np.ndarray:
        kind, c = self.nonlinearity, self.c
        if kind == "zero":
            return np.zeros_like(u)
        if kind == "sin":
            return c * np.sin(u)
        if kind == "tanh":
            return c * np.tanh(u)
        if kind == "affine":
            return c * u
        return np.asarray(self.f(u), dtype=float)

    def f_diff(self, u: np.ndarray, w: np.ndarray) -> np.ndarray:
        kind, c = self.nonlinearity, self.c
        if kind == "zero":
            return np.zeros_like(u)
        if kind == "sin":
            return 2.0 * c * np.cos(u + 0.5 * w) * np.sin(0.5 * w)
        if kind == "tanh":
            with np.errstate(over="ignore"):
                d = c * np.sinh(w) / (np.cosh(u + w) * np.cosh(u))
            bad = ~np.isfinite(d)
            if np.any(bad):
                d = np.where(bad, c * (np.tanh(u + w) - np.tanh(u)), d)
            return d
        if kind == "affine":
            return c * w
        return self.f_point(u + w) - self.f_point(u)


@dataclass(frozen=True, eq=False)
class StateE:
    """Modal coefficients of a state ``(u, v)`` in ``E = H^1_0 x L^2``."""

    u_modes: np.ndarray
    v_modes: np.ndarray

    def __post_init__(self):
        u = np.array(self.u_modes, dtype=float)
        v = np.array(self.v_modes, dtype=float)
        if u.shape != v.shape or u.ndim != 1:
            raise ValueError("u_modes and v_modes must be 1-d of equal length")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ValueError("state has non-finite entries")
        u.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "u_modes", u)
        object.__setattr__(self, "v_modes", v)

    @classmethod
    def zeros(cls, M: int) -> "StateE":
        return cls(np.zeros(M), np.zeros(M))

    @classmethod
    def from_array(cls, x: np.ndarray) -> "StateE":
        x = np.asarray(x)
        return cls(x[:, 0], x[:, 1])

    def as_array(self) -> np.ndarray:
        return np.stack([self.u_modes, self.v_modes], axis=-1)

    @property
    def M(self) -> int:
        return len(self.u_modes)

    def __add__(self, other: "StateE") -> "StateE":
        return StateE(self.u_modes + other.u_modes, self.v_modes + other.v_modes)

    def __sub__(self, other: "StateE") -> "StateE":
        return StateE(self.u_modes - other.u_modes, self.v_modes - other.v_modes)

    def __mul__(self, a: float) -> "StateE":
        return StateE(a * self.u_modes, a * self.v_modes)

    __rmul__ = __mul__

    def __neg__(self) -> "StateE":
        return StateE(-self.u_modes, -self.v_modes)

    def allclose(self, other: "StateE", rtol=1e-12, atol=0.0) -> bool:
        return np.allclose(self.as_array(), other.as_array(), rtol=rtol, atol=atol)


@dataclass(frozen=True, eq=False)
class EigenData:
    spec: WaveSpec
    k: np.ndarray
    lam_plus: np.ndarray
    lam_minus: np.ndarray
    blocks: np.ndarray
    disc_sign: np.ndarray
    gram: np.ndarray
    proj: np.ndarray

    @property
    def alpha(self) -> float:
        return float(self.lam_plus[self.spec.N - 1].real)

    @property
    def beta(self) -> float:
        return float(self.lam_plus[self.spec.N].real)

    @cached_property
    def colloc(self) -> np.ndarray:
        """``sin(k x_j)`` on the interior points ``x_j = j pi/(G+1)``, shape (G, M)."""
        G = self.spec.G
        x = np.arange(1, G + 1) * math.pi / (G + 1)
        return np.sin(np.outer(x, self.k))

    @cached_property
    def analysis(self) -> np.ndarray:
        """Trapezoid sine analysis, shape (G, M): coefficients = values @ analysis."""
        return self.colloc * (2.0 / (self.spec.G + 1))

    @cached_property
    def e_plus_norms(self) -> np.ndarray:
        N = self.spec.N
        vec = np.stack([np.ones(N), self.lam_plus[:N].real], axis=-1)
        return np.sqrt(np.einsum("ki,kij,kj->k", vec, self.gram[:N], vec))


@lru_cache(maxsize=64)
def eigen_data(spec: WaveSpec) -> EigenData:
    eps, M, N = spec.epsilon, spec.M, spec.N
    k = np.arange(1, M + 1, dtype=float)
    disc = 1.0 - 4.0 * eps**2 * k**2
    root = np.sqrt(disc.astype(complex))
    lam_p = (-1.0 + root) / (2.0 * eps**2)
    lam_m = (-1.0 - root) / (2.0 * eps**2)
    sign = np.sign(disc).astype(int)
    blocks = np.zeros((M, 2, 2))
    blocks[:, 0, 1] = 1.0
    blocks[:, 1, 0] = -(k**2) / eps**2
    blocks[:, 1, 1] = -1.0 / eps**2
    q = 1.0 / (4.0 * eps**2)
    a = np.where(k <= N, q - k**2, k**2 + q - 2.0 * (N + 1) ** 2)
    gram = np.empty((M, 2, 2))
    gram[:, 0, 0] = a + q
    gram[:, 0, 1] = gram[:, 1, 0] = 0.5
    gram[:, 1, 1] = eps**2
    gram *= HALF_PI
    proj = np.zeros((M, 2, 2))
    lp, lm = lam_p[:N].real, lam_m[:N].real
    d = lp - lm
    # P(u, v) = xi+ (1, lam+), xi+ = (v - lam- u)/(lam+ - lam-)
    proj[:N, 0, 0] = -lm / d
    proj[:N, 0, 1] = 1.0 / d
    proj[:N, 1, 0] = -lp * lm / d
    proj[:N, 1, 1] = lp / d
    return EigenData(spec, k, lam_p, lam_m, blocks, sign, gram, proj)


def _arr(U) -> np.ndarray:
    return U.as_array() if isinstance(U, StateE) else np.asarray(U, dtype=float)


def inner_product_E(U1, U2, spec: WaveSpec) -> float:
    x1, x2 = _arr(U1), _arr(U2)
    if x1.shape != x2.shape or x1.shape[-2] != spec.M:
        raise ValueError("states must share M")
    return float(np.einsum("ki,kij,kj->", x1, eigen_data(spec).gram, x2))


def norm_E(x, spec: WaveSpec) -> np.ndarray | float:
    """E-norm of a state or of a batch of modal arrays ``(..., M, 2)``."""
    x = _arr(x)
    g = eigen_data(spec).gram
    u, v = x[..., 0], x[..., 1]
    q = ((g[:, 0, 0] * u + 2.0 * g[:, 0, 1] * v) * u + g[:, 1, 1] * v * v).sum(axis=-1)
    q = np.sqrt(np.maximum(q, 0.0))
    return float(q) if q.ndim == 0 else q


def project_P(U, spec: WaveSpec):
    x = np.einsum("kij,...kj->...ki", eigen_data(spec).proj, _arr(U))
    return StateE.from_array(x) if isinstance(U, StateE) else x


def project_Q(U, spec: WaveSpec):
    x = _arr(U)
    q = x - np.einsum("kij,...kj->...ki", eigen_data(spec).proj, x)
    return StateE.from_array(q) if isinstance(U, StateE) else q


def p_coords(U, spec: WaveSpec) -> np.ndarray:
    """Coefficients of ``e_k^+`` (k <= N) in the spectral splitting of ``U``."""
    x = _arr(U)
    ev = eigen_data(spec)
    N = spec.N
    lp, lm = ev.lam_plus[:N].real, ev.lam_minus[:N].real
    return (x[..., :N, 1] - lm * x[..., :N, 0]) / (lp - lm)


def from_p_coords(xi, spec: WaveSpec) -> StateE:
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (spec.N,):
        raise ValueError(f"expected {spec.N} P-coordinates")
    ev = eigen_data(spec)
    u = np.zeros(spec.M)
    v = np.zeros(spec.M)
    u[: spec.N] = xi
    v[: spec.N] = xi * ev.lam_plus[: spec.N].real
    return StateE(u, v)


def mode_exponentials(spec: WaveSpec, t: float) -> np.ndarray:
    """Exact ``exp(A_k t)`` for every mode, shape (M, 2, 2).

    Uses ``exp(A t) = e^{mu t}(C(t) I + S(t)(A - mu I))`` with ``mu = -1/(2 eps^2)``;
    ``C, S`` are hyperbolic, trigonometric or polynomial according to the sign of
    the discriminant, and are formed from ``e^{lam+ t}``, ``e^{lam- t}`` when
    ``|d t|`` is large to avoid overflow in cosh/sinh.
    """
    ev = eigen_data(spec)
    eps = spec.epsilon
    mu = -0.5 / eps**2
    disc = 1.0 - 4.0 * eps**2 * ev.k**2
    d = np.sqrt(np.abs(disc)) / (2.0 * eps**2)
    x = d * t
    C = np.empty_like(d)
    S = np.empty_like(d)
    with np.errstate(over="ignore", invalid="ignore"):
        emu = math.exp(mu * t) if mu * t < 709 else math.inf
        real = disc > 0
        small = real & (np.abs(x) <= 1.0)
        big = real & ~small
        C[small] = emu * np.cosh(x[small])
        xs = x[small]
        S[small] = emu * t * np.where(xs == 0, 1.0, np.sinh(xs) / np.where(xs == 0, 1.0, xs))
        lp = ev.lam_plus.real[big]
        lm = ev.lam_minus.real[big]
        ep, em = np.exp(lp * t), np.exp(lm * t)
        C[big] = 0.5 * (ep + em)
        S[big] = (ep - em) / (2.0 * d[big])
        cplx = disc < 0
        C[cplx] = emu * np.cos(x[cplx])
        S[cplx] = emu * t * np.sinc(x[cplx] / math.pi)
        jord = disc == 0
        C[jord] = emu
        S[jord] = emu * t
    B = ev.blocks.copy()
    B[:, 0, 0] -= mu
    B[:, 1, 1] -= mu
    out = S[:, None, None] * B
    out[:, 0, 0] += C
    out[:, 1, 1] += C
    return out


def _backward_apply(x: np.ndarray, t: float, spec: WaveSpec, z_exponent: float) -> np.ndarray:
    # for t < 0 the fast components blow up; go through eigen-coordinates so that
    # exactly vanishing components (e.g. a P-state) stay zero instead of inf * 0
    ev = eigen_data(spec)
    real = ev.disc_sign > 0
    with np.errstate(over="ignore", invalid="ignore"):
        E = mode_exponentials(spec, t)
        y = np.einsum("kij,...kj->...ki", E, x) * math.exp(z_exponent)
        lp, lm = ev.lam_plus.real[real], ev.lam_minus.real[real]
        u, v = x[..., real, 0], x[..., real, 1]
        cp = (v - lm * u) / (lp - lm)
        cm = (lp * u - v) / (lp - lm)
        gp = np.where(cp == 0, 0.0, cp * np.exp(lp * t + z_exponent))
        gm = np.where(cm == 0, 0.0, cm * np.exp(lm * t + z_exponent))
    y[..., real, 0] = gp + gm
    y[..., real, 1] = lp * gp + lm * gm
    return y


def semigroup_apply(U, t: float, spec: WaveSpec, z_exponent: float = 0.0):
    """``e^{At + z_exponent} U``; for ``t < 0`` only components that stay finite are allowed."""
    x = _arr(U)
    if not (np.all(np.isfinite(x)) and math.isfinite(t) and math.isfinite(z_exponent)):
        raise ValueError("non-finite input to semigroup_apply")
    if t >= 0:
        E = mode_exponentials(spec, t)
        y = np.einsum("kij,...kj->...ki", E, x) * math.exp(z_exponent)
    else:
        y = _backward_apply(x, t, spec, z_exponent)
    if not np.all(np.isfinite(y)):
        raise FloatingPointError(f"semigroup overflow at t={t}")
    return StateE.from_array(y) if isinstance(U, StateE) else y


def nonlinear_modes(u_modes: np.ndarray, spec: WaveSpec) -> np.ndarray:
    """Sine coefficients of ``f(u)`` by collocation; ``u_modes`` shape (..., M)."""
    ev = eigen_data(spec)
    if spec.nonlinearity == "zero":
        return np.zeros_like(u_modes)
    grid = u_modes @ ev.colloc.T
    vals = spec.f_point(grid)
    if not np.all(np.isfinite(vals)):
        bad = np.argwhere(~np.isfinite(vals))[0]
        x = (bad[-1] + 1) * math.pi / (spec.G + 1)
        raise FloatingPointError(f"non-finite f at collocation point x={x:.6g}")
    return vals @ ev.analysis


def nonlinear_diff_modes(u_modes: np.ndarray, w_modes: np.ndarray, spec: WaveSpec) -> np.ndarray:
    """Sine coefficients of ``f(u + w) - f(u)`` without cancellation."""
    ev = eigen_data(spec)
    if spec.nonlinearity == "zero":
        return np.zeros_like(u_modes)
    gu = u_modes @ ev.colloc.T
    gw = w_modes @ ev.colloc.T
    return spec.f_diff(gu, gw) @ ev.analysis


def apply_F(U, z_value: float, spec: WaveSpec):
    """``F(omega, U) = (delta phi z, eps^-2 f(u))`` at noise value ``z_value``."""
    x = _arr(U)
    out = np.empty_like(x)
    out[..., 0] = spec.delta * np.asarray(z_value)[..., None] * spec.phi
    out[..., 1] = nonlinear_modes(x[..., 0], spec) / spec.epsilon**2
    return StateE.from_array(out) if isinstance(U, StateE) else out


def epsilon_lip(N: int) -> float:
    """Largest eps with ``1/sqrt(1/4 - eps^2 (N+1)^2) <= 3``."""
    return math.sqrt(5.0) / (6.0 * (N + 1))


def lipschitz_factor(spec: WaveSpec) -> float:
    """The sharp E-norm Lipschitz factor ``1/sqrt(1/4 - eps^2 (N+1)^2)`` of F per unit lip_f."""
    return 1.0 / math.sqrt(0.25 - spec.epsilon**2 * (spec.N + 1) ** 2)


def norm_equivalence(spec: WaveSpec) -> tuple[float, float]:
    """Constants ``c, C`` with ``c |U| <= |U|_E <= C |U|`` against the standard norm of E."""
    ev = eigen_data(spec)
    lo, hi = math.inf, 0.0
    for k, g in zip(ev.k, ev.gram):
        std = HALF_PI * np.diag([1.0 + k**2, 1.0])
        w = np.linalg.eigvals(np.linalg.solve(std, g)).real
        lo, hi = min(lo, w.min()), max(hi, w.max())
    return math.sqrt(lo), math.sqrt(hi)


def check_declared_lipschitz(spec: WaveSpec, n_probe: int = 200, seed: int = 0) -> float:
    """Spot-check a declared ``lip_f`` by random probing; warns on violation."""
    ev = eigen_data(spec)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_probe):
        u1, u2 = rng.standard_normal((2, spec.M)) / ev.k
        g1, g2 = u1 @ ev.colloc.T, u2 @ ev.colloc.T
        num = np.linalg.norm(spec.f_point(g1) - spec.f_point(g2))
        den = np.linalg.norm(g1 - g2)
        if den > 0:
            worst = max(worst, num / den)
    if worst > spec.lip_f * (1 + 1e-9):
        warnings.warn(f"probed Lipschitz ratio {worst:.4g} exceeds declared lip_f={spec.lip_f}")
    return worst


_SPEC_KEYS = ("epsilon", "M", "N", "G", "nonlinearity", "c", "lip_f", "delta", "phi")


def dump_spec(spec: WaveSpec) -> str:
    vals = {
        "epsilon": repr(spec.epsilon),
        "M": str(spec.M),
        "N": str(spec.N),
        "G": str(spec.G),
        "nonlinearity": spec.nonlinearity,
        "c": repr(spec.c),
        "lip_f": repr(spec.lip_f),
        "delta": repr(spec.delta),
        "phi": ", ".join(repr(p) for p in spec.phi_modes),
    }
    return "".join(f"{k} = {vals[k]}\n" for k in _SPEC_KEYS)


def parse_spec(text: str, f: Callable | None = None) -> WaveSpec:
    kv: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecError(f"line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _SPEC_KEYS:
            raise SpecError(f"line {lineno}: unknown key {key!r}")
        kv[key] = val
    missing = {"epsilon", "M", "N"} - kv.keys()
    if missing:
        raise SpecError(f"missing keys: {sorted(missing)}")
    return WaveSpec(
        epsilon=float(kv["epsilon"]),
        M=int(kv["M"]),
        N=int(kv["N"]),
        G=int(kv["G"]) if "G" in kv else None,
        nonlinearity=kv.get("nonlinearity", "sin"),
        c=float(kv.get("c", 1.0)),
        lip_f=float(kv["lip_f"]) if "lip_f" in kv else None,
        delta=float(kv.get("delta", 0.0)),
        phi_modes=tuple(float(p) for p in kv["phi"].split(",")) if "phi" in kv else (1.0,),
        f=f,
    )


def write_state_csv(dest, U: StateE) -> None:
    with open(dest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "u_k", "v_k"])
        for k, (u, v) in enumerate(zip(U.u_modes, U.v_modes), 1):
            w.writerow([k, f"{u:.17g}", f"{v:.17g}"])


def read_state_csv(src) -> StateE:
    data = np.loadtxt(src, delimiter=",", skiprows=1, ndmin=2)
    return StateE(data[:, 1], data[:, 2])
