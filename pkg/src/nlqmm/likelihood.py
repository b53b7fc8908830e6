"""Laplace-approximated marginal log-likelihood and its sigma-profiled form."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .core import NLQMMError, NumericalError, VarianceSpec, check_tau, materialize_psi
from .remode import MAX_MODE_ITER, MODE_TOL, ClusterBatch, ModeSolution, solve_modes

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-10
# "weighted": H = J'AJ/omega + inv(Psi), the derivative of the mode equations.
# "unweighted": H = J'J/2 + inv(Psi), which stays bounded as omega -> 0.
CURVATURES = ("weighted", "unweighted")


class DegenerateFitError(NLQMMError):
    """The summed penalized loss is not positive (exact interpolation)."""


@dataclass
class LoglikBreakdown:
    total: float
    kernel_term: float
    logdet_term: float
    h_term: float
    per_cluster_h: np.ndarray
    sigma_used: float
    modes: ModeSolution


def log_det_terms(psi, JtAJ, omega) -> np.ndarray:
    """Per-cluster ``log|Psi H|`` with ``H = J'AJ/omega + inv(Psi)``.

    Evaluated as ``log|I + L' J'AJ L / omega|`` (``Psi = LL'``), which is
    symmetric and at least zero.
    """
    L = np.linalg.cholesky(np.atleast_2d(psi))
    K = np.einsum("ji,mjk,kl->mil", L, JtAJ, L) / omega
    K += np.eye(L.shape[0])
    try:
        C = np.linalg.cholesky(K)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("log-determinant matrix is not positive definite") from exc
    return 2.0 * np.log(np.diagonal(C, axis1=1, axis2=2)).sum(axis=1)


def sigma_hat(per_cluster_h, N: int, strict: bool = True) -> float:
    """Profiled scale ``sum(h) / (2N)``.

    A non-positive sum means exact interpolation; ``strict`` raises, otherwise
    the value is floored with a warning.
    """
    total = float(np.sum(per_cluster_h))
    sig = total / (2.0 * N)
    if not sig > SIGMA_FLOOR:
        if strict:
            raise DegenerateFitError(f"sum of h is {total:.3g}; the fit interpolates the data")
        warnings.warn("degenerate scale estimate floored", RuntimeWarning, stacklevel=2)
        sig = SIGMA_FLOOR
    return sig


class LaplaceLikelihood:
    """Likelihood evaluator bound to one dataset, model, design and smoothing level.

    Modes are recomputed at every evaluation, warm-started from ``warm_modes``.
    """

    def __init__(
        self,
        batch: ClusterBatch,
        variance_spec: VarianceSpec,
        tau: float,
        omega: float,
        warm_modes=None,
        mode_tol: float = MODE_TOL,
        max_mode_iter: int = MAX_MODE_ITER,
        curvature: str = "weighted",
    ):
        if curvature not in CURVATURES:
            raise ValueError(f"curvature must be one of {CURVATURES}, got {curvature!r}")
        if variance_spec.q != batch.q:
            raise ValueError(f"variance spec has q={variance_spec.q}, design has q={batch.q}")
        self.batch = batch
        self.spec = variance_spec
        self.tau = check_tau(tau)
        self.omega = float(omega)
        self.mode_tol = mode_tol
        self.max_mode_iter = max_mode_iter
        self.curvature = curvature
        self.warm_modes = (
            np.zeros((batch.M, batch.q)) if warm_modes is None else np.array(warm_modes, dtype=float)
        )
        self.evaluations = 0
        self.mode_iterations = 0

    @property
    def p(self):
        return self.batch.p

    def split(self, theta):
        theta = np.asarray(theta, dtype=float)
        return theta[: self.p], theta[self.p :]

    def modes(self, beta, psi) -> ModeSolution:
        sol = solve_modes(
            self.batch, beta, psi, self.omega, self.tau, self.warm_modes,
            self.mode_tol, self.max_mode_iter,
        )
        self.evaluations += 1
        self.mode_iterations += sol.iterations
        return sol

    def _parts(self, theta):
        beta, xi = self.split(theta)
        psi = materialize_psi(xi, self.spec)
        sol = self.modes(beta, psi)
        if self.curvature == "weighted":
            ld = log_det_terms(psi, sol.JtAJ, self.omega)
        else:
            JtJ = self.batch.csum(sol.J[:, :, None] * sol.J[:, None, :])
            ld = log_det_terms(psi, JtJ, 2.0)
        return sol, ld

    def loglik(self, theta, sigma: float) -> LoglikBreakdown:
        sigma = float(sigma)
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        sol, ld = self._parts(theta)
        N, tau = self.batch.N, self.tau
        kernel = N * np.log(tau * (1.0 - tau) / sigma)
        logdet = -0.5 * float(ld.sum())
        hterm = -float(sol.h.sum()) / (2.0 * sigma)
        return LoglikBreakdown(kernel + logdet + hterm, kernel, logdet, hterm, sol.h, sigma, sol)

    def profiled(self, theta, strict: bool = False):
        """Profiled log-likelihood; returns ``(value, sigma_hat, modes)``."""
        sol, ld = self._parts(theta)
        N, tau = self.batch.N, self.tau
        sig = sigma_hat(sol.h, N, strict=strict)
        value = N * (np.log(tau * (1.0 - tau) / sig) - 1.0) - 0.5 * float(ld.sum())
        return float(value), sig, sol

    def negative_profiled(self, theta) -> float:
        """Objective for the minimizers: ``inf`` where the model cannot be evaluated."""
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                value = self.profiled(theta)[0]
        except (NumericalError, ValueError, np.linalg.LinAlgError) as exc:
            log.debug("objective undefined at %s: %s", theta, exc)
            return np.inf
        return -value if np.isfinite(value) else np.inf


def laplace_loglik(
    theta, batch: ClusterBatch, variance_spec: VarianceSpec, omega, tau, sigma, warm_modes=None,
    mode_tol: float = MODE_TOL,
    curvature: str = "weighted",
) -> LoglikBreakdown:
    """Laplace approximation of the smoothed marginal log-likelihood."""
    lik = LaplaceLikelihood(
        batch, variance_spec, tau, omega, warm_modes, mode_tol, curvature=curvature
    )
    return lik.loglik(theta, sigma)


def profiled_loglik(
    theta, batch: ClusterBatch, variance_spec: VarianceSpec, omega, tau, warm_modes=None,
    mode_tol: float = MODE_TOL,
    curvature: str = "weighted",
):
    """``(value, sigma_hat, modes)`` of the sigma-profiled Laplace log-likelihood."""
    lik = LaplaceLikelihood(
        batch, variance_spec, tau, omega, warm_modes, mode_tol, curvature=curvature
    )
    return lik.profiled(theta, strict=True)
