"""Discrete variation-of-constants sums in eigen-coordinates.

For a step ``dt`` and forcing samples ``F_n`` the Lyapunov-Perron and tracking
operators need recurrences ``c_{n+1} = a c_n + b_n`` per eigen-coordinate, with
``a = e^{lam dt}`` and ``b_n`` a quadrature of the exponential kernel against
``F``. Every recurrence is scalar except for modes at exactly the defective
point ``4 eps^2 k^2 = 1``, which fall back to a 2x2 loop.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import expm
from scipy.signal import lfilter

from .spectral import WaveSpec, eigen_data

QUADRATURES = ("exact", "lawson", "linear")

_DEFECT_RTOL = 1e-6


def _phi12(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x)
    small = np.abs(x) < 1e-3
    xs = np.where(small, 1.0, x)
    phi1 = np.where(small, 1 + x / 2 + x**2 / 6, np.expm1(xs) / xs)
    phi2 = np.where(small, 0.5 + x / 6 + x**2 / 24, (np.expm1(xs) - xs) / xs**2)
    return phi1, phi2


class ModalPropagator:
    """Step-``dt`` propagation data for ``spec``.

    ``quadrature`` selects the per-step weights of the forcing:

    * ``exact``  -- ``int_0^dt e^{A(dt-s)} ds F_n`` (left-point samples)
    * ``lawson`` -- ``dt e^{A dt} F_n`` (the weight of the Lawson-Euler integrator)
    * ``linear`` -- exact kernel against the linear interpolant of ``F_n, F_{n+1}``
    """

    def __init__(self, spec: WaveSpec, dt: float, quadrature: str = "exact"):
        if quadrature not in QUADRATURES:
            raise ValueError(f"unknown quadrature {quadrature!r}")
        self.spec = spec
        self.dt = dt
        self.quadrature = quadrature
        ev = eigen_data(spec)
        M, N = spec.M, spec.N
        lam = np.stack([ev.lam_plus, ev.lam_minus], axis=-1)
        gap = np.abs(ev.lam_plus - ev.lam_minus)
        self.jordan = gap <= _DEFECT_RTOL * np.abs(ev.lam_plus)
        self.lam = lam
        self.real_modes = np.all(np.abs(lam.imag) == 0, axis=-1)
        self.all_real = bool(np.all(self.real_modes))
        self.dtype = float if self.all_real else complex
        if self.all_real:
            lam = lam.real
            self.lam = lam
        self.a = np.exp(lam * dt)
        phi1, phi2 = _phi12(lam * dt)
        if quadrature == "exact":
            self.w0, self.w1 = dt * phi1, None
        elif quadrature == "lawson":
            self.w0, self.w1 = dt * self.a, None
        else:
            self.w0, self.w1 = dt * (phi1 - phi2), dt * phi2
        self.p_mask = np.zeros((M, 2), dtype=bool)
        self.p_mask[:N, 0] = True
        self._lp = ev.lam_plus.real if self.all_real else ev.lam_plus
        self._lm = ev.lam_minus.real if self.all_real else ev.lam_minus
        self._jordan_mats = {}
        for i in np.flatnonzero(self.jordan):
            self._jordan_mats[i] = self._matrix_weights(ev.blocks[i])

    def _matrix_weights(self, A: np.ndarray):
        dt = self.dt
        Z = np.zeros((6, 6))
        Z[:2, :2] = A * dt
        Z[:2, 2:4] = np.eye(2)
        Z[2:4, 4:6] = np.eye(2)
        big = expm(Z)
        Phi, P1, P2 = big[:2, :2], big[:2, 2:4], big[:2, 4:6]
        if self.quadrature == "exact":
            return Phi, dt * P1, None
        if self.quadrature == "lawson":
            return Phi, dt * Phi, None
        return Phi, dt * (P1 - P2), dt * P2

    # coordinates --------------------------------------------------------
    def to_coords(self, x: np.ndarray) -> np.ndarray:
        """Modal ``(..., M, 2)`` -> eigen-coordinates (complex unless all modes are real); defective modes stay modal."""
        lp, lm = self._lp, self._lm
        u, v = x[..., 0], x[..., 1]
        d = np.where(self.jordan, 1.0, lp - lm)
        c = np.empty(x.shape, dtype=self.dtype)
        c[..., 0] = (v - lm * u) / d
        c[..., 1] = (lp * u - v) / d
        if np.any(self.jordan):
            c[..., self.jordan, :] = x[..., self.jordan, :]
        return c

    def from_coords(self, c: np.ndarray) -> np.ndarray:
        lp, lm = self._lp, self._lm
        x = np.empty(c.shape, dtype=float)
        x[..., 0] = (c[..., 0] + c[..., 1]).real
        x[..., 1] = (lp * c[..., 0] + lm * c[..., 1]).real
        if np.any(self.jordan):
            x[..., self.jordan, :] = c[..., self.jordan, :].real
        return x

    # recurrences --------------------------------------------------------
    def forcing(self, c: np.ndarray) -> np.ndarray:
        """Per-step forcing ``b_n`` (n = 0..T-1) from coordinate samples ``c`` of length T+1."""
        b = self.w0 * c[:-1]
        if self.w1 is not None:
            b = b + self.w1 * c[1:]
        for i, (_, W0, W1) in self._jordan_mats.items():
            bi = c[:-1, i, :] @ W0.T
            if W1 is not None:
                bi = bi + c[1:, i, :] @ W1.T
            b[:, i, :] = bi
        return b

    def forward(self, b: np.ndarray, c0: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """``c_{n+1} = a c_n + b_n`` from ``c_0`` on the columns in ``mask``; others are zero."""
        T = b.shape[0]
        out = np.zeros((T + 1,) + b.shape[1:], dtype=self.dtype)
        M = b.shape[1]
        for k in range(M):
            if self.jordan[k]:
                if mask[k].any():
                    out[:, k, :] = self._jordan_forward(k, b[:, k, :], c0[k])
                continue
            for j in (0, 1):
                if not mask[k, j]:
                    continue
                out[:, k, j] = _ar1(self.a[k, j], b[:, k, j], c0[k, j], self.real_modes[k])
        return out

    def backward(self, b: np.ndarray, cT: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """``c_n = (c_{n+1} - b_n)/a`` from the terminal value ``c_T`` on ``mask`` columns."""
        T = b.shape[0]
        out = np.zeros((T + 1,) + b.shape[1:], dtype=self.dtype)
        for k, j in zip(*np.nonzero(mask)):
            if self.jordan[k]:
                raise ValueError("backward recurrence on a defective mode")
            inv = 1.0 / self.a[k, j]
            rev = _ar1(inv, -inv * b[::-1, k, j], cT[k, j], self.real_modes[k])
            out[:, k, j] = rev[::-1]
        return out

    def _jordan_forward(self, k, b, c0):
        Phi = self._jordan_mats[k][0]
        out = np.empty((b.shape[0] + 1, 2), dtype=self.dtype)
        out[0] = c0
        y = np.asarray(c0, dtype=self.dtype)
        for n in range(b.shape[0]):
            y = Phi @ y + b[n]
            out[n + 1] = y
        return out

    def powers(self, n: np.ndarray) -> np.ndarray:
        """``a^n`` for integer offsets ``n`` (possibly negative), shape (len(n), M, 2)."""
        return np.exp(np.multiply.outer(np.asarray(n) * self.dt, self.lam))


def _ar1(a, x, y0, real):
    if real:
        a = a.real
        xx = np.empty(len(x) + 1)
        xx[0] = np.real(y0)
        xx[1:] = x.real
    else:
        xx = np.empty(len(x) + 1, dtype=complex)
        xx[0] = y0
        xx[1:] = x
    return lfilter([1.0], [1.0, -a], xx)
