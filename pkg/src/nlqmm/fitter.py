"""Estimation: starting values, the shrinking-omega outer loop, final refresh."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import least_squares

from .core import (
    ClusteredDataset,
    FitResult,
    InvalidParameterError,
    IterationRecord,
    NLQMMError,
    NumericalError,
    VarianceSpec,
    check_tau,
    materialize_psi,
)
from .likelihood import CURVATURES, LaplaceLikelihood
from .loss import kappa
from .model import DesignMap, ModelSpec
from .optimize import METHODS, OptimizerReport
from .remode import MODE_TOL, ClusterBatch, solve_modes

log = logging.getLogger(__name__)


class StartError(NLQMMError):
    """No starting value strategy succeeded."""

    def __init__(self, message, errors=()):
        super().__init__(message)
        self.errors = list(errors)


class NLRQError(NLQMMError):
    pass


class FitError(NLQMMError):
    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)


@dataclass(frozen=True)
class FitControl:
    """Tuning of the outer algorithm.

    ``gamma`` shrinks ``omega`` between outer iterations; ``omega0`` defaults
    to the residual standard deviation of the starting fit. ``curvature``
    selects the Hessian in the Laplace log-determinant (see
    ``likelihood.CURVATURES``); the weighted form lets the variance run off to
    infinity once few residuals fall inside the smoothing band.
    """

    max_outer: int = 500
    loglik_rel_tol: float = 1e-4
    gamma: float = 0.5
    omega0: Optional[float] = None
    optimizer_order: tuple = ("quasi-newton", "simplex")
    seed: int = 0
    mode_tol: float = MODE_TOL
    max_mode_iter: int = 50
    bfgs_max_iter: int = 100
    bfgs_gtol: float = 1e-4
    bfgs_ftol: float = 1e-8
    simplex_max_evals: int = 2000
    xi0: Optional[Sequence[float]] = None
    curvature: str = "unweighted"

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise InvalidParameterError("gamma must lie in (0, 1)")
        if self.omega0 is not None and not self.omega0 > 0:
            raise InvalidParameterError("omega0 must be positive")
        if self.max_outer < 1:
            raise InvalidParameterError("max_outer must be >= 1")
        unknown = set(self.optimizer_order) - set(METHODS)
        if unknown or not self.optimizer_order:
            raise InvalidParameterError(f"unknown optimizers {sorted(unknown)}")
        if self.curvature not in CURVATURES:
            raise InvalidParameterError(f"curvature must be one of {CURVATURES}")


@dataclass
class StartValues:
    beta: np.ndarray
    xi: np.ndarray
    sigma: float
    omega: float
    modes: np.ndarray
    method: str
    errors: list = field(default_factory=list)


def _run(method, objective, x0, control, callback=None) -> OptimizerReport:
    if method == "quasi-newton":
        return METHODS[method](
            objective, x0, max_iter=control.bfgs_max_iter, gtol=control.bfgs_gtol,
            ftol=control.bfgs_ftol, callback=callback,
        )
    return METHODS[method](objective, x0, max_evals=control.simplex_max_evals, callback=callback)


def _optimize(objective, x0, control, callback=None):
    """Try the optimizers in order; later ones restart from ``x0`` after a failure."""
    reports = []
    for method in control.optimizer_order:
        rep = _run(method, objective, x0, control, callback)
        reports.append(rep)
        if not rep.failed:
            break
    return reports


# ---------------------------------------------------------------------------
# Fixed-effects-only quantile regression
# ---------------------------------------------------------------------------


class _FixedBatch:
    def __init__(self, dataset, model, design):
        self.y = dataset.y
        self.x = dataset.x
        self.F, _ = design.build(dataset.x)
        self.model = model

    def fitted(self, beta):
        return self.model.eval_f(self.F @ beta, self.x)


@dataclass
class NLRQResult:
    beta: np.ndarray
    loss: float
    omega: float
    iterations: int
    converged: bool
    residuals: np.ndarray


def nlrq_fit(
    dataset: ClusteredDataset,
    model: ModelSpec,
    design: DesignMap,
    tau,
    beta_start,
    control: FitControl = FitControl(),
) -> NLRQResult:
    """Quantile regression ignoring clustering, by the same smoothing schedule.

    Minimizes ``sum kappa(y - f(F beta))`` while shrinking ``omega``.
    """
    tau = check_tau(tau)
    fb = _FixedBatch(dataset, model, design)
    beta = np.asarray(beta_start, dtype=float).reshape(-1)
    if beta.size != design.p:
        raise InvalidParameterError(f"start has {beta.size} values, design needs p={design.p}")
    if dataset.N <= design.p:
        raise NLRQError(f"{dataset.N} observations cannot identify {design.p} parameters")
    if np.ptp(dataset.y) == 0:
        raise NLRQError("response has no variation; quantiles are not identified")

    def resid(b):
        with np.errstate(all="ignore"):
            return fb.y - fb.fitted(b)

    try:
        r0 = resid(beta)
    except NumericalError as exc:
        raise NLRQError(f"model undefined at the start: {exc}") from exc
    if not np.all(np.isfinite(r0)):
        raise NLRQError("model is not finite at the start")
    omega = control.omega0 or max(float(np.std(r0)), 1e-3)

    def objective(b, om):
        try:
            r = resid(b)
        except NumericalError:
            return np.inf
        v = float(np.sum(kappa(tau, om, r)))
        return v if np.isfinite(v) else np.inf

    prev = objective(beta, omega)
    converged = False
    t = 0
    for t in range(1, control.max_outer + 1):
        reports = _optimize(lambda b: objective(b, omega), beta, control)
        rep = reports[-1]
        if rep.failed:
            raise NLRQError(f"all optimizers failed at iteration {t} ({rep.status})")
        beta = rep.x_best
        cur = rep.f_best
        if abs(cur - prev) < control.loglik_rel_tol * max(abs(prev), 1e-12):
            converged = True
            break
        prev = cur
        omega *= control.gamma
    r = resid(beta)
    return NLRQResult(beta, float(np.sum(kappa(tau, omega, r))), omega, t, converged, r)


def nlrq_start(dataset, model, design, tau, beta_start, control: FitControl = FitControl()):
    """Fixed-effect starting values from independent-data quantile regression."""
    return nlrq_fit(dataset, model, design, tau, beta_start, control).beta


def nls_start(dataset, model, design, beta_start) -> np.ndarray:
    """Pooled nonlinear least squares, the fallback start."""
    fb = _FixedBatch(dataset, model, design)

    def resid(b):
        try:
            with np.errstate(all="ignore"):
                r = fb.y - fb.fitted(b)
        except NumericalError:
            return np.full(fb.y.shape, 1e10)
        return np.where(np.isfinite(r), r, 1e10)

    sol = least_squares(resid, np.asarray(beta_start, dtype=float), method="lm")
    if not sol.success or not np.all(np.isfinite(sol.x)):
        raise NLQMMError(f"nonlinear least squares failed: {sol.message}")
    return sol.x


def starting_values(
    dataset: ClusteredDataset,
    model: ModelSpec,
    design: DesignMap,
    variance_spec: VarianceSpec,
    tau,
    beta_start,
    control: FitControl = FitControl(),
) -> StartValues:
    tau = check_tau(tau)
    errors = []
    method = "nlrq"
    try:
        beta = nlrq_start(dataset, model, design, tau, beta_start, control)
    except (NLQMMError, ValueError) as exc:
        errors.append(exc)
        log.info("quantile regression start failed (%s); using least squares", exc)
        try:
            beta = nls_start(dataset, model, design, beta_start)
            method = "nls"
        except (NLQMMError, ValueError) as exc2:
            errors.append(exc2)
            raise StartError("no starting value strategy succeeded", errors) from exc2
    fb = _FixedBatch(dataset, model, design)
    r = fb.y - fb.fitted(beta)
    sigma = float(np.mean(np.abs(r)))
    omega = control.omega0 if control.omega0 is not None else max(float(np.std(r)), 1e-3)
    xi = np.zeros(variance_spec.m) if control.xi0 is None else np.asarray(control.xi0, float)
    batch = ClusterBatch(dataset, model, design)
    sol = solve_modes(
        batch, beta, materialize_psi(xi, variance_spec), omega, tau, None,
        control.mode_tol, control.max_mode_iter,
    )
    return StartValues(beta, xi, sigma, omega, sol.U, method, errors)


# ---------------------------------------------------------------------------
# Main loop
# ---------------------------------------------------------------------------


class _Objective:
    """Negative profiled likelihood that keeps warm-start modes at accepted points."""

    def __init__(self, lik: LaplaceLikelihood):
        self.lik = lik
        self._last = None

    def __call__(self, theta):
        theta = np.asarray(theta, dtype=float)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                value, _, sol = self.lik.profiled(theta)
        except (NumericalError, ValueError, np.linalg.LinAlgError):
            return np.inf
        self._last = (theta.tobytes(), sol)
        return -value if np.isfinite(value) else np.inf

    def accept(self, theta):
        theta = np.asarray(theta, dtype=float)
        if self._last is None or self._last[0] != theta.tobytes():
            self(theta)
        if self._last is not None and self._last[0] == theta.tobytes():
            self.lik.warm_modes = self._last[1].U.copy()


def fit(
    dataset: ClusteredDataset,
    model: ModelSpec,
    design: DesignMap,
    variance_spec: VarianceSpec,
    tau,
    beta_start,
    control: FitControl = FitControl(),
    start: Optional[StartValues] = None,
) -> FitResult:
    """Fit a nonlinear quantile mixed model at one quantile level.

    Each outer iteration maximizes the profiled Laplace log-likelihood over
    ``(beta, xi)`` at the current ``omega``, then shrinks ``omega`` by
    ``gamma`` until the relative change in log-likelihood falls below
    ``loglik_rel_tol``. ``start`` skips the starting-value stage.
    """
    tau = check_tau(tau)
    if variance_spec.q != design.q:
        raise InvalidParameterError(f"variance spec q={variance_spec.q} but design q={design.q}")
    if start is None:
        start = starting_values(dataset, model, design, variance_spec, tau, beta_start, control)
    batch = ClusterBatch(dataset, model, design)
    omega = start.omega
    lik = LaplaceLikelihood(
        batch, variance_spec, tau, omega, start.modes, control.mode_tol, control.max_mode_iter,
        control.curvature,
    )
    obj = _Objective(lik)
    theta = np.concatenate([start.beta, start.xi])
    prev = -obj(theta)
    if not np.isfinite(prev):
        raise FitError("log-likelihood is not finite at the starting values")
    obj.accept(theta)
    trace: list[IterationRecord] = []
    converged = False
    for t in range(1, control.max_outer + 1):
        lik.omega = omega
        if t > 1:
            obj.accept(theta)
        evals0, modeit0 = lik.evaluations, lik.mode_iterations
        reports = _optimize(obj, theta, control, obj.accept)
        rep = min(reports, key=lambda r: r.f_best if np.isfinite(r.f_best) else np.inf)
        if not np.isfinite(rep.f_best):
            if t == 1:
                raise FitError("every optimizer failed at the first iteration", trace)
            # keep the last accepted iterate and its smoothing level
            omega = trace[-1].omega
            break
        theta = rep.x_best
        obj.accept(theta)
        cur = -rep.f_best
        trace.append(
            IterationRecord(
                t, omega, cur, reports[-1].method, reports[-1].status,
                lik.evaluations - evals0, lik.mode_iterations - modeit0,
            )
        )
        log.debug("iteration %d omega=%.3g loglik=%.6f (%s)", t, omega, cur, rep.status)
        if abs(cur - prev) < control.loglik_rel_tol * abs(prev):
            converged = True
            break
        prev = cur
        if t < control.max_outer:
            omega *= control.gamma
    lik.omega = omega
    obj.accept(theta)
    try:
        value, sigma, sol = lik.profiled(theta, strict=True)
    except (NumericalError, np.linalg.LinAlgError) as exc:
        raise FitError(f"final log-likelihood evaluation failed: {exc}", trace) from exc
    beta, xi = lik.split(theta)
    return FitResult(
        tau=tau,
        beta=beta.copy(),
        xi=xi.copy(),
        psi=materialize_psi(xi, variance_spec),
        sigma=sigma,
        u_modes=sol.U.copy(),
        loglik=value,
        omega=omega,
        converged=converged,
        outer_iterations=len(trace),
        variance_spec=variance_spec,
        cluster_ids=dataset.ids,
        trace=trace,
    )
