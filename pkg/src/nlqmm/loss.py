"""Quantile check loss and its piecewise-quadratic smooth approximation.

The smoothed loss ``kappa`` is quadratic on the band ``((tau-1)*omega, tau*omega)``
and linear outside it. Over a residual vector it decomposes exactly as
``0.5 * (r'Ar/omega + b'r + c'1)`` with diagonal ``A`` driven by a sign vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import InvalidParameterError, check_tau


@dataclass(frozen=True)
class SmoothingParam:
    omega: float
    gamma: float = 0.5

    def __post_init__(self):
        if not self.omega > 0:
            raise InvalidParameterError("omega must be positive")
        if not 0 < self.gamma < 1:
            raise InvalidParameterError("gamma must lie in (0, 1)")

    def shrink(self) -> "SmoothingParam":
        return SmoothingParam(self.omega * self.gamma, self.gamma)


@dataclass(frozen=True)
class QuadCoeffs:
    a_diag: np.ndarray
    b: np.ndarray
    c: np.ndarray
    s: np.ndarray

    def half_form(self, r, omega) -> float:
        """``0.5 * (r'Ar/omega + b'r + c'1)``, equal to the summed smoothed loss."""
        r = np.asarray(r, dtype=float)
        return 0.5 * (np.dot(self.a_diag * r, r) / omega + np.dot(self.b, r) + self.c.sum())


def rho(tau, r):
    """Check loss ``r * (tau - 1{r < 0})``."""
    tau = check_tau(tau)
    r = np.asarray(r, dtype=float)
    out = r * (tau - (r < 0))
    return out if out.ndim else float(out)


def _check_omega(omega):
    omega = float(omega)
    if not omega > 0:
        raise InvalidParameterError("omega must be positive")
    return omega


def kappa(tau, omega, r):
    tau = check_tau(tau)
    omega = _check_omega(omega)
    r = np.asarray(r, dtype=float)
    lo, hi = (tau - 1.0) * omega, tau * omega
    out = np.where(
        r <= lo,
        r * (tau - 1.0) - 0.5 * (tau - 1.0) ** 2 * omega,
        np.where(r >= hi, r * tau - 0.5 * tau**2 * omega, r * r / (2.0 * omega)),
    )
    return out if out.ndim else float(out)


def sign_vector(tau, omega, r) -> np.ndarray:
    """Branch indicator: -1 below the band (inclusive), +1 above (inclusive), 0 inside."""
    tau = check_tau(tau)
    omega = _check_omega(omega)
    r = np.asarray(r, dtype=float)
    s = np.zeros(r.shape, dtype=np.int8)
    s[r <= (tau - 1.0) * omega] = -1
    s[r >= tau * omega] = 1
    return s


def quad_coeffs(tau, omega, r) -> QuadCoeffs:
    s = sign_vector(tau, omega, r)
    a, b, c = _abc(float(tau), float(omega), s)
    return QuadCoeffs(a, b, c, s)


def _abc(tau: float, omega: float, s: np.ndarray):
    sf = s.astype(float)
    s2 = sf * sf
    a = 1.0 - s2
    b = sf * ((2.0 * tau - 1.0) * sf + 1.0)
    c = 0.5 * ((1.0 - 2.0 * tau) * omega * sf - (1.0 - 2.0 * tau + 2.0 * tau * tau) * omega * s2)
    return a, b, c


def smoothing_bound(tau, omega) -> float:
    """Largest gap between the smoothed and the exact check loss."""
    return 0.5 * omega * max(tau * tau, (1.0 - tau) ** 2)
