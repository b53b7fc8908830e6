"""Monte-Carlo scenarios for logistic and biexponential quantile mixed models.

Four generators with ``M`` clusters of ``n`` observations each:

1. logistic, random upper asymptote and midpoint, normal errors;
2. as 1 with chi-squared(3) errors scaled by ``1/sqrt(6)``;
3. logistic with the skewed error inside the exponential (heteroscedastic),
   one random effect on the midpoint;
4. biexponential with four random effects and a shrinking error envelope.

Random streams come from ``numpy.random.default_rng`` (PCG64) seeded with
``(seed, replication)`` so every replication is reproducible on its own.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import Cluster, ClusteredDataset, InvalidParameterError, NLQMMError, VarianceSpec
from .fitter import FitControl, fit, nlrq_fit
from .model import DesignMap, ModelSpec, builtin_biexp, builtin_logistic4, identity_design

log = logging.getLogger(__name__)

SCENARIO_BETA = {
    1: (70.0, 10.0, 3.0, 10.0),
    2: (70.0, 10.0, 3.0, 10.0),
    3: (1.0, 4.0, 1.0, 0.0),
    4: (2.0, 0.8, 0.4, -1.5),
}
SCENARIO_SIGMA = {
    1: np.array([[4.0, -2.0], [-2.0, 5.0]]),
    2: np.array([[4.0, -2.0], [-2.0, 5.0]]),
    3: np.array([[0.1]]),
    4: 0.1 * np.eye(4),
}
SCENARIO_XMAX = {1: 20.0, 2: 20.0, 3: 5.0, 4: 8.0}
ESTIMATORS = ("nlqmm", "nlrq")
HARNESS_CONTROL = FitControl(gamma=0.2, loglik_rel_tol=1e-4, max_outer=500)


@dataclass(frozen=True)
class ScenarioSpec:
    id: int
    M: int = 100
    n: int = 10
    seed: int = 1
    centered_chisq: bool = False

    def __post_init__(self):
        if self.id not in SCENARIO_BETA:
            raise InvalidParameterError(f"scenario must be one of 1-4, got {self.id}")
        if self.M < 1 or self.n < 1:
            raise InvalidParameterError("M and n must be positive")

    @property
    def beta(self) -> np.ndarray:
        return np.array(SCENARIO_BETA[self.id])

    @property
    def sigma(self) -> np.ndarray:
        return SCENARIO_SIGMA[self.id]

    @property
    def x_max(self) -> float:
        return SCENARIO_XMAX[self.id]


def scenario_model(scenario: int):
    """Model, design and variance structure fitted to a scenario's data."""
    if scenario in (1, 2):
        return builtin_logistic4(), identity_design(4, [0, 1]), VarianceSpec("general", 2)
    if scenario == 3:
        return builtin_logistic4(), identity_design(4, [1]), VarianceSpec("general", 1)
    if scenario == 4:
        return builtin_biexp(), identity_design(4, [0, 1, 2, 3]), VarianceSpec("diagonal", 4)
    raise InvalidParameterError(f"scenario must be one of 1-4, got {scenario}")


def _chisq3(rng, size, scale, centered):
    z = rng.chisquare(3, size)
    return ((z - 3.0) if centered else z) / scale


def scenario_response(spec: ScenarioSpec, x, u, eps) -> np.ndarray:
    """Noise-driven response for one cluster given covariates, effects and errors."""
    b = spec.beta
    x = np.asarray(x, dtype=float)
    if spec.id in (1, 2):
        return (b[0] - b[3] + u[0]) / (1.0 + np.exp((b[1] + u[1] - x) / b[2])) + b[3] + eps
    if spec.id == 3:
        return (b[0] - b[3]) / (1.0 + np.exp((b[1] + u[0] - x - 0.5 * x * eps) / b[2])) + b[3]
    return (
        (b[0] + u[0]) * np.exp(-np.exp(b[1] + u[1]) * x)
        + (b[2] + u[2]) * np.exp(-np.exp(b[3] + u[3]) * x)
        + (1.0 - x / 8.0) * eps
    )


def rng_for(seed: int, replication: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(replication)]))


def gen_scenario(spec: ScenarioSpec, replication: int = 0):
    """Draw one dataset; returns ``(dataset, true_random_effects)``."""
    rng = rng_for(spec.seed, replication)
    M, n = spec.M, spec.n
    q = spec.sigma.shape[0]
    U = rng.multivariate_normal(np.zeros(q), spec.sigma, size=M, method="cholesky")
    x = rng.uniform(0.0, spec.x_max, size=(M, n))
    if spec.id == 1:
        eps = rng.standard_normal((M, n))
    elif spec.id == 2:
        eps = _chisq3(rng, (M, n), math.sqrt(6.0), spec.centered_chisq)
    elif spec.id == 3:
        eps = _chisq3(rng, (M, n), math.sqrt(60.0), spec.centered_chisq)
    else:
        eps = rng.normal(0.0, math.sqrt(0.1), (M, n))
    clusters = [
        Cluster(i + 1, scenario_response(spec, x[i], U[i], eps[i]), x[i]) for i in range(M)
    ]
    return ClusteredDataset(clusters), U


# ---------------------------------------------------------------------------
# Replication study
# ---------------------------------------------------------------------------


@dataclass
class StudyRecord:
    scenario: int
    replication: int
    tau: float
    estimator: str
    beta: Optional[np.ndarray]
    converged: bool
    seconds: float
    error: str = ""
    sigma_cov: Optional[np.ndarray] = None
    omega: float = float("nan")
    iterations: int = 0

    @property
    def ok(self) -> bool:
        return self.beta is not None and self.converged and bool(np.all(np.isfinite(self.beta)))


@dataclass
class StudySummary:
    scenarios: tuple
    taus: tuple
    estimators: tuple
    R: int
    records: list = field(default_factory=list)

    def select(self, scenario, tau, estimator) -> list:
        return [
            r for r in self.records
            if r.scenario == scenario and r.tau == tau and r.estimator == estimator
        ]

    def estimates(self, scenario, tau, estimator) -> np.ndarray:
        """Estimates of the usable replications, ordered by replication."""
        rows = [r.beta for r in self.select(scenario, tau, estimator) if r.ok]
        return np.array(rows, dtype=float).reshape(len(rows), len(SCENARIO_BETA[scenario]))

    def failures(self, scenario, tau, estimator) -> int:
        return sum(not r.ok for r in self.select(scenario, tau, estimator))

    def stats(self, scenario, tau, estimator):
        """``(mean, sd, R_used)``; ``sd`` is NaN with fewer than two replications."""
        est = self.estimates(scenario, tau, estimator)
        p = len(SCENARIO_BETA[scenario])
        if est.shape[0] == 0:
            return np.full(p, np.nan), np.full(p, np.nan), 0
        sd = est.std(axis=0, ddof=1) if est.shape[0] > 1 else np.full(p, np.nan)
        return est.mean(axis=0), sd, est.shape[0]


def _fit_one(spec, ds, tau, estimator, control) -> StudyRecord:
    model, design, vs = scenario_model(spec.id)
    t0 = time.perf_counter()
    try:
        if estimator == "nlqmm":
            res = fit(ds, model, design, vs, tau, spec.beta, control)
            rec = StudyRecord(
                spec.id, -1, tau, estimator, res.beta, res.converged, 0.0,
                sigma_cov=res.sigma_cov, omega=res.omega, iterations=res.outer_iterations,
            )
        else:
            res = nlrq_fit(ds, model, design, tau, spec.beta, control)
            rec = StudyRecord(
                spec.id, -1, tau, estimator, res.beta, res.converged, 0.0,
                omega=res.omega, iterations=res.iterations,
            )
    except (NLQMMError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        rec = StudyRecord(spec.id, -1, tau, estimator, None, False, 0.0, error=str(exc))
    rec.seconds = time.perf_counter() - t0
    return rec


def run_study(
    scenarios: Iterable[int],
    taus: Sequence[float],
    R: int,
    control: FitControl = HARNESS_CONTROL,
    estimators: Sequence[str] = ESTIMATORS,
    seed: int = 1,
    M: int = 100,
    n: int = 10,
    centered_chisq: bool = False,
    threads: int = 1,
    progress=None,
) -> StudySummary:
    """Fit every (scenario, replication, tau, estimator) and collect the estimates.

    Failures are recorded, never raised. Records are stored in a fixed order
    (scenario, replication, tau, estimator) whatever the thread count.
    ``progress`` is called with each finished record.
    """
    if R < 1:
        raise InvalidParameterError("R must be at least 1")
    scenarios = tuple(int(s) for s in scenarios)
    taus = tuple(float(t) for t in taus)
    estimators = tuple(estimators)
    bad = set(estimators) - set(ESTIMATORS)
    if bad or not estimators:
        raise InvalidParameterError(f"unknown estimators {sorted(bad)}")
    if not taus:
        raise InvalidParameterError("at least one tau is required")
    specs = [ScenarioSpec(s, M, n, seed, centered_chisq) for s in scenarios]
    tasks = [
        (spec, rep, tau, est)
        for spec in specs for rep in range(R) for tau in taus for est in estimators
    ]
    data_cache = {}

    def run(task):
        spec, rep, tau, est = task
        key = (spec.id, rep)
        if key not in data_cache:
            data_cache[key] = gen_scenario(spec, rep)[0]
        rec = _fit_one(spec, data_cache[key], tau, est, control)
        rec.replication = rep
        log.info(
            "scenario %d rep %d tau %g %s: %s (%.1fs)", spec.id, rep, tau, est,
            "ok" if rec.ok else (rec.error or "not converged"), rec.seconds,
        )
        if progress is not None:
            progress(rec)
        return rec

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        for spec in specs:  # generate up front so workers only read the cache
            for rep in range(R):
                data_cache[(spec.id, rep)] = gen_scenario(spec, rep)[0]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(run, tasks))
    else:
        records = [run(task) for task in tasks]
    return StudySummary(scenarios, taus, estimators, R, records)


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def _num(v, digits=6) -> str:
    return "NA" if v is None or not np.isfinite(v) else f"{v:.{digits}f}"


def summary_rows(summary: StudySummary) -> list:
    rows = []
    for s in summary.scenarios:
        for est in summary.estimators:
            for tau in summary.taus:
                mean, sd, used = summary.stats(s, tau, est)
                for k in range(mean.size):
                    rows.append(
                        dict(
                            scenario=s, tau=tau, estimator=est, coef=f"beta{k + 1}",
                            mean=mean[k], sd=sd[k], R_used=used,
                        )
                    )
    return rows


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def summary_csv(summary: StudySummary) -> str:
    header = ["scenario", "tau", "estimator", "coef", "mean", "sd", "R_used"]
    rows = [
        [r["scenario"], f"{r['tau']:g}", r["estimator"], r["coef"], _num(r["mean"]),
         _num(r["sd"]), r["R_used"]]
        for r in summary_rows(summary)
    ]
    return _csv(header, rows)


def raw_csv(summary: StudySummary) -> str:
    p = max(len(SCENARIO_BETA[s]) for s in summary.scenarios)
    header = ["scenario", "replication", "tau", "estimator", "status"]
    header += [f"beta{k + 1}" for k in range(p)]
    rows = []
    for r in summary.records:
        status = "ok" if r.ok else ("not-converged" if r.beta is not None else "error")
        beta = list(r.beta) if r.beta is not None else [np.nan] * p
        rows.append(
            [r.scenario, r.replication, f"{r.tau:g}", r.estimator, status]
            + [_num(b, 10) for b in beta]
        )
    return _csv(header, rows)


def summarize_to_table(summary: StudySummary) -> str:
    """Plain-text summary tables with ``mean (sd)`` per coefficient."""
    if not summary.records:
        raise InvalidParameterError("empty summary")
    out = []
    for s in summary.scenarios:
        p = len(SCENARIO_BETA[s])
        head = f"{'':12}" + "".join(f"{'beta' + str(k + 1):>18}" for k in range(p))
        out.append(f"Scenario {s} (R = {summary.R})")
        out.append(head)
        for est in summary.estimators:
            out.append(est.upper())
            for tau in summary.taus:
                mean, sd, used = summary.stats(s, tau, est)
                cells = "".join(f"{_num(m, 2) + ' (' + _num(d, 2) + ')':>18}" for m, d in zip(mean, sd))
                fails = summary.failures(s, tau, est)
                note = f"  [{fails} failed]" if fails else ""
                out.append(f"{'tau = ' + format(tau, 'g'):12}{cells}{note}")
        out.append("")
    return "\n".join(out)
