"""Cluster (block) bootstrap standard errors for the fixed effects."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import ClusteredDataset, FitResult, InvalidParameterError, NLQMMError, VarianceSpec
from .fitter import FitControl, StartValues, fit
from .model import DesignMap, ModelSpec
from .remode import ClusterBatch, solve_modes

log = logging.getLogger(__name__)


class BootstrapError(NLQMMError):
    def __init__(self, message, failures=()):
        super().__init__(message)
        self.failures = list(failures)


@dataclass
class BootstrapResult:
    replicates: np.ndarray  # (B_used, p), ordered by replicate index
    se: np.ndarray
    failures: int
    B_requested: int
    B_used: int
    failure_log: list = field(default_factory=list)


def resample_clusters(dataset: ClusteredDataset, rng: np.random.Generator) -> ClusteredDataset:
    """Draw ``M`` clusters with replacement, relabelled ``0..M-1``."""
    idx = rng.integers(0, dataset.M, size=dataset.M)
    return dataset.subset(idx, relabel=True)


def replicate_rng(seed: int, b: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(b)]))


def _warm_start(ds, model, design, spec, tau, base: FitResult, omega, control) -> StartValues:
    batch = ClusterBatch(ds, model, design)
    sol = solve_modes(
        batch, base.beta, base.psi, omega, tau, None, control.mode_tol, control.max_mode_iter
    )
    return StartValues(base.beta.copy(), base.xi.copy(), base.sigma, omega, sol.U, "warm")


def cluster_bootstrap(
    dataset: ClusteredDataset,
    model: ModelSpec,
    design: DesignMap,
    variance_spec: VarianceSpec,
    tau: float,
    control: FitControl = FitControl(),
    B: int = 200,
    seed: int = 0,
    beta_start=None,
    base_fit: Optional[FitResult] = None,
    threads: int = 1,
) -> BootstrapResult:
    """Block bootstrap: resample whole clusters, refit, take the sd of the estimates.

    Replicates are warm-started from ``base_fit`` (fitted here when absent)
    with the smoothing restarted at ``control.omega0`` or the original
    starting omega. Failed replicates are dropped and counted; more than
    half failing raises ``BootstrapError``.
    """
    if B < 2:
        raise InvalidParameterError("B must be at least 2")
    if base_fit is None:
        if beta_start is None:
            raise InvalidParameterError("either base_fit or beta_start is required")
        base_fit = fit(dataset, model, design, variance_spec, tau, beta_start, control)
    omega0 = control.omega0 if control.omega0 is not None else base_fit.trace[0].omega

    def one(b):
        ds = resample_clusters(dataset, replicate_rng(seed, b))
        try:
            start = _warm_start(ds, model, design, variance_spec, tau, base_fit, omega0, control)
            res = fit(ds, model, design, variance_spec, tau, base_fit.beta, control, start=start)
        except (NLQMMError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            return None, f"replicate {b}: {exc}"
        if not res.converged or not np.all(np.isfinite(res.beta)):
            return None, f"replicate {b}: not converged"
        return res.beta, None

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(one, range(B)))
    else:
        outcomes = [one(b) for b in range(B)]
    betas = [beta for beta, _ in outcomes if beta is not None]
    failure_log = [msg for _, msg in outcomes if msg is not None]
    if len(failure_log) > B / 2:
        raise BootstrapError(f"{len(failure_log)} of {B} bootstrap replicates failed", failure_log)
    reps = np.array(betas).reshape(len(betas), design.p)
    se = reps.std(axis=0, ddof=1) if len(betas) > 1 else np.full(design.p, np.nan)
    for msg in failure_log:
        log.info(msg)
    return BootstrapResult(reps, se, len(failure_log), B, len(betas), failure_log)
