"""Shared data model: clustered data, variance parameterizations, fit results."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Hashable, Sequence

import numpy as np


class NLQMMError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(NLQMMError, ValueError):
    pass


class NumericalError(NLQMMError, ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Cluster:
    """Observations of one cluster (subject, plot, ...).

    ``x`` is an ``(n_i, d)`` covariate matrix. By convention column 0 holds
    the covariate that enters the nonlinear function (time, dose, ...).
    """

    id: Hashable
    y: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if y.size == 0:
            raise InvalidParameterError(f"cluster {self.id!r} is empty")
        if x.shape[0] != y.shape[0]:
            raise InvalidParameterError(
                f"cluster {self.id!r}: {x.shape[0]} covariate rows for {y.shape[0]} responses"
            )
        if not np.all(np.isfinite(y)):
            raise InvalidParameterError(f"cluster {self.id!r} has non-finite responses")
        y.setflags(write=False)
        x.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)

    @property
    def n(self) -> int:
        return self.y.shape[0]


class ClusteredDataset:
    """Two-level nested data: ``M`` clusters holding ``N`` observations in total.

    Cluster order and the row order inside each cluster are those of the input.
    Stacked (flat) views used by the vectorized solvers are built once.
    """

    def __init__(self, clusters: Sequence[Cluster]):
        clusters = tuple(clusters)
        if not clusters:
            raise InvalidParameterError("dataset needs at least one cluster")
        ids = [c.id for c in clusters]
        if len(set(ids)) != len(ids):
            raise InvalidParameterError("cluster identifiers must be unique")
        d = {c.x.shape[1] for c in clusters}
        if len(d) != 1:
            raise InvalidParameterError("all clusters must have the same number of covariates")
        self.clusters = clusters
        self.sizes = np.array([c.n for c in clusters], dtype=int)
        self.starts = np.concatenate([[0], np.cumsum(self.sizes)[:-1]]).astype(int)
        self.y = np.concatenate([c.y for c in clusters])
        self.x = np.vstack([c.x for c in clusters])
        self.index = np.repeat(np.arange(len(clusters)), self.sizes)
        for a in (self.y, self.x, self.sizes, self.starts, self.index):
            a.setflags(write=False)

    @classmethod
    def from_arrays(cls, y, x, groups) -> "ClusteredDataset":
        """Group flat arrays by ``groups``; clusters appear in first-seen order."""
        y = np.asarray(y, dtype=float).reshape(-1)
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        groups = np.asarray(groups)
        if not (len(y) == len(x) == len(groups)):
            raise InvalidParameterError("y, x and groups must have the same length")
        order: dict[Any, list[int]] = {}
        for i, g in enumerate(groups.tolist()):
            order.setdefault(g, []).append(i)
        return cls([Cluster(g, y[rows], x[rows]) for g, rows in order.items()])

    @property
    def N(self) -> int:
        return int(self.sizes.sum())

    @property
    def M(self) -> int:
        return len(self.clusters)

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def ids(self) -> list:
        return [c.id for c in self.clusters]

    def subset(self, indices: Sequence[int], relabel: bool = False) -> "ClusteredDataset":
        """Dataset made of the clusters at ``indices`` (repeats allowed if relabelled)."""
        out = []
        for k, i in enumerate(indices):
            c = self.clusters[i]
            out.append(Cluster((k, c.id) if relabel else c.id, c.y, c.x))
        return ClusteredDataset(out)

    def __len__(self):
        return self.M

    def __repr__(self):
        return f"ClusteredDataset(M={self.M}, N={self.N}, d={self.d})"


def check_tau(tau) -> float:
    """Validate a quantile level; it must lie strictly inside (0, 1)."""
    tau = float(tau)
    if not (0.0 < tau < 1.0):
        raise InvalidParameterError(f"quantile level must be in (0, 1), got {tau}")
    return tau


# ---------------------------------------------------------------------------
# Variance parameterization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VarianceSpec:
    """Structure of the scaled random-effects covariance ``Psi``.

    ``diagonal`` uses one log standard deviation per effect; ``general`` uses a
    log-Cholesky factor (log diagonal, then the strict lower triangle column by column).
    """

    structure: str
    q: int

    def __post_init__(self):
        if self.structure not in ("diagonal", "general"):
            raise InvalidParameterError(f"unknown variance structure {self.structure!r}")
        if int(self.q) < 1:
            raise InvalidParameterError("random-effect dimension must be >= 1")

    @property
    def m(self) -> int:
        q = self.q
        return q if self.structure == "diagonal" else q * (q + 1) // 2

    def xi_from_psi(self, psi) -> np.ndarray:
        """Inverse of :func:`materialize_psi` (off-diagonals dropped for ``diagonal``)."""
        psi = np.atleast_2d(np.asarray(psi, dtype=float))
        if self.structure == "diagonal":
            return 0.5 * np.log(np.diag(psi))
        L = np.linalg.cholesky(psi)
        rows, cols = _strict_lower(self.q)
        return np.concatenate([np.log(np.diag(L)), L[rows, cols]])


def _strict_lower(q: int):
    # column-major order of the strict lower triangle
    cols, rows = np.triu_indices(q, 1)
    return rows, cols


def materialize_psi(xi, spec: VarianceSpec) -> np.ndarray:
    """Map the unconstrained vector ``xi`` to an SPD matrix ``Psi``."""
    xi = np.asarray(xi, dtype=float).reshape(-1)
    if xi.shape[0] != spec.m:
        raise InvalidParameterError(
            f"{spec.structure} structure with q={spec.q} needs {spec.m} parameters, got {xi.shape[0]}"
        )
    if not np.all(np.isfinite(xi)):
        raise InvalidParameterError("non-finite variance parameter")
    q = spec.q
    if spec.structure == "diagonal":
        return np.diag(np.exp(2.0 * xi))
    L = np.diag(np.exp(xi[:q]))
    rows, cols = _strict_lower(q)
    L[rows, cols] = xi[q:]
    return L @ L.T


def precision_factor(psi) -> np.ndarray:
    """Relative precision factor ``Delta`` with ``Delta.T @ Delta == inv(Psi)``."""
    psi = np.atleast_2d(np.asarray(psi, dtype=float))
    try:
        L = np.linalg.cholesky(psi)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("Psi is not symmetric positive definite") from exc
    return np.linalg.solve(L, np.eye(psi.shape[0]))


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass
class IterationRecord:
    iteration: int
    omega: float
    loglik: float
    optimizer: str
    status: str
    evaluations: int
    mode_iterations: int


@dataclass
class FitResult:
    """Estimates from one quantile-level fit."""

    tau: float
    beta: np.ndarray
    xi: np.ndarray
    psi: np.ndarray
    sigma: float
    u_modes: np.ndarray
    loglik: float
    omega: float
    converged: bool
    outer_iterations: int
    variance_spec: VarianceSpec
    cluster_ids: list = field(default_factory=list)
    trace: list[IterationRecord] = field(default_factory=list)

    @property
    def sigma_cov(self) -> np.ndarray:
        """Random-effects covariance on the data scale, ``sigma * Psi``."""
        return self.sigma * self.psi

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "beta": self.beta.tolist(),
            "xi": self.xi.tolist(),
            "psi": self.psi.tolist(),
            "sigma": self.sigma,
            "sigma_cov": self.sigma_cov.tolist(),
            "u_modes": self.u_modes.tolist(),
            "cluster_ids": [_jsonable(c) for c in self.cluster_ids],
            "loglik": self.loglik,
            "omega": self.omega,
            "converged": self.converged,
            "outer_iterations": self.outer_iterations,
            "variance": {"structure": self.variance_spec.structure, "q": self.variance_spec.q},
            "trace": [vars(r) for r in self.trace],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        return cls(
            tau=d["tau"],
            beta=np.asarray(d["beta"], dtype=float),
            xi=np.asarray(d["xi"], dtype=float),
            psi=np.asarray(d["psi"], dtype=float),
            sigma=d["sigma"],
            u_modes=np.asarray(d["u_modes"], dtype=float).reshape(len(d["cluster_ids"]), -1),
            loglik=d["loglik"],
            omega=d["omega"],
            converged=d["converged"],
            outer_iterations=d["outer_iterations"],
            variance_spec=VarianceSpec(d["variance"]["structure"], d["variance"]["q"]),
            cluster_ids=list(d["cluster_ids"]),
            trace=[IterationRecord(**r) for r in d.get("trace", [])],
        )


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, tuple):
        return [_jsonable(a) for a in v]
    return v
