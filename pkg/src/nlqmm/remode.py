"""Conditional modes of the random effects.

For fixed ``(beta, Psi, omega)`` every cluster minimizes the penalized
objective ``h(u) = 2 * sum kappa(y - f(beta, u)) + u' inv(Psi) u`` by damped
Gauss-Newton. All clusters are solved together on stacked arrays; per-cluster
sums use ``np.add.reduceat`` over the contiguous cluster blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Cluster, ClusteredDataset, NumericalError, check_tau, precision_factor
from .loss import QuadCoeffs, _abc, sign_vector
from .model import DesignMap, ModelDomainError, ModelSpec

MODE_TOL = 1e-6
MAX_MODE_ITER = 50
MAX_HALVINGS = 12
# a step that lowers h by less than this (relative) ends the search for that cluster
FLAT_TOL = 1e-9


class ClusterBatch:
    """A dataset stacked together with its design matrices and model."""

    def __init__(self, dataset: ClusteredDataset, model: ModelSpec, design: DesignMap):
        if design.s != model.s:
            raise ValueError(f"design has s={design.s} but model {model.name} needs s={model.s}")
        self.dataset = dataset
        self.model = model
        self.design = design
        self.y = dataset.y
        self.x = dataset.x
        self.index = dataset.index
        self.starts = dataset.starts
        self.sizes = dataset.sizes
        self.F, self.G = design.build(dataset.x)
        self.M, self.N = dataset.M, dataset.N
        self.p, self.q = design.p, design.q
        # padded (M, n_max) row table for per-cluster line searches; -1 pads
        n_max = int(self.sizes.max())
        col = np.arange(n_max)
        self.pad_mask = col[None, :] < self.sizes[:, None]
        self.pad_rows = np.where(self.pad_mask, self.starts[:, None] + col[None, :], 0)
        # fixed-effect part of phi is shared by every evaluation at a given beta
        self._beta_key = None
        self._phi_fixed = None

    def phi_fixed(self, beta) -> np.ndarray:
        beta = np.asarray(beta, dtype=float)
        key = beta.tobytes()
        if key != self._beta_key:
            self._phi_fixed = self.F @ beta
            self._beta_key = key
        return self._phi_fixed

    def phi(self, beta, U) -> np.ndarray:
        return self.phi_fixed(beta) + np.einsum("nsq,nq->ns", self.G, U[self.index])

    def rows(self, clusters) -> np.ndarray:
        """Row indices of the listed clusters, in order."""
        clusters = np.asarray(clusters)
        if clusters.size == self.M:
            return np.arange(self.N)
        sizes = self.sizes[clusters]
        offsets = np.cumsum(sizes) - sizes
        return np.repeat(self.starts[clusters] - offsets, sizes) + np.arange(sizes.sum())

    def fitted(self, beta, U) -> np.ndarray:
        f = self.model.eval_f(self.phi(beta, U), self.x)
        _check_finite(f, "quantile function")
        return f

    def fitted_and_jac(self, beta, U):
        phi = self.phi(beta, U)
        f = self.model.eval_f(phi, self.x)
        _check_finite(f, "quantile function")
        grad = self.model.dphi(phi, self.x) if self.model.dphi else self.model.grad(phi, self.x)
        J = np.einsum("ns,nsq->nq", grad, self.G)
        _check_finite(J, "derivative")
        return f, J

    def csum(self, a) -> np.ndarray:
        """Per-cluster sums along the first axis."""
        return np.add.reduceat(a, self.starts, axis=0)


def _check_finite(a, what):
    bad = ~np.isfinite(a)
    if bad.any():
        i = int(np.flatnonzero(bad.reshape(a.shape[0], -1).any(axis=1))[0])
        raise ModelDomainError(f"non-finite {what} at observation {i}", index=i)


def _penalty(U, Delta):
    # ||Delta u||^2 stays non-negative where u' inv(Psi) u may not in floating point
    DU = U @ Delta.T
    return np.einsum("mi,mi->m", DU, DU)


def _h_values(batch, r, U, Delta, omega, tau):
    s = sign_vector(tau, omega, r)
    a, b, c = _abc(tau, omega, s)
    return batch.csum(a * r * r / omega + b * r + c) + _penalty(U, Delta), (s, a, b, c)


@dataclass
class ModeSolution:
    """Modes of all clusters plus the quantities the likelihood needs."""

    U: np.ndarray  # (M, q)
    h: np.ndarray  # (M,)
    grad: np.ndarray  # (M, q)
    JtAJ: np.ndarray  # (M, q, q), sum_j a_j J_j J_j'
    iterations: int
    converged: np.ndarray  # (M,) bool
    stalled: np.ndarray  # (M,) bool
    r: np.ndarray  # (N,) residuals at the modes
    J: np.ndarray  # (N, q)
    s: np.ndarray  # (N,) sign vector


def _evaluate(batch, beta, clusters, U_sub, Delta, omega, tau, jac=True):
    """``h`` (and with ``jac`` its derivatives) for a subset of clusters.

    ``clusters=None`` means all of them. Returns ``h`` alone, or
    ``(h, g, JtAJ, r, J, s)`` with ``r, J, s`` on the subset's rows.
    """
    if clusters is None:
        rows, sizes, starts = slice(None), batch.sizes, batch.starts
    else:
        rows = batch.rows(clusters)
        sizes = batch.sizes[clusters]
        starts = np.cumsum(sizes) - sizes
    G = batch.G[rows]
    phi = batch.phi_fixed(beta)[rows] + np.einsum("nsq,nq->ns", G, np.repeat(U_sub, sizes, axis=0))
    x = batch.x[rows]
    f = batch.model.eval_f(phi, x)
    _check_finite(f, "quantile function")
    r = batch.y[rows] - f
    s = sign_vector(tau, omega, r)
    a, b, c = _abc(tau, omega, s)
    h = np.add.reduceat(a * r * r / omega + b * r + c, starts) + _penalty(U_sub, Delta)
    if not jac:
        return h
    model = batch.model
    grad = model.dphi(phi, x) if model.dphi else model.grad(phi, x)
    J = np.einsum("ns,nsq->nq", grad, G)
    _check_finite(J, "derivative")
    w = (2.0 / omega) * a * r + b
    g = -np.add.reduceat(J * w[:, None], starts, axis=0) + 2.0 * U_sub @ (Delta.T @ Delta)
    JtAJ = np.add.reduceat(a[:, None, None] * J[:, :, None] * J[:, None, :], starts, axis=0)
    return h, g, JtAJ, r, J, s


def _state(batch, beta, U, Delta, omega, tau):
    return _evaluate(batch, beta, None, U, Delta, omega, tau)


def _line_minimum(R, V, mask, U, D, Pinv, omega, tau):
    """Exact minimizer over ``t >= 0`` of ``h`` linearized along ``u + t d``.

    With residuals ``r - t v`` the objective is convex and piecewise quadratic
    in ``t``; its derivative ``-sum v psi(r - t v) + 2 (u + t d)' inv(Psi) d``,
    ``psi(z) = clip(2z/omega, 2(tau-1), 2tau)``, is piecewise linear with
    breakpoints where a residual crosses a band edge. ``R, V`` are padded
    ``(m, n)`` arrays with ``mask`` marking real rows.
    """
    lo, hi = 2.0 * (tau - 1.0), 2.0 * tau
    V = np.where(mask, V, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        T = np.concatenate([(R - tau * omega) / V, (R - (tau - 1.0) * omega) / V], axis=1)
    T = np.where(np.isfinite(T) & (T > 0), T, np.inf)
    T = np.sort(T, axis=1)
    T = np.concatenate([np.zeros((T.shape[0], 1)), T], axis=1)
    Tf = np.where(np.isfinite(T), T, 0.0)
    Z = R[:, None, :] - Tf[:, :, None] * V[:, None, :]
    psi = np.clip(2.0 * Z / omega, lo, hi)
    PD = D @ Pinv
    curv = 2.0 * np.einsum("mq,mq->m", PD, D)
    base = 2.0 * np.einsum("mq,mq->m", U @ Pinv, D)
    dphi = -np.einsum("mkn,mn->mk", psi, V) + base[:, None] + curv[:, None] * Tf
    # padding columns (no breakpoint) must never stop the search
    dphi = np.where(np.isfinite(T), dphi, -np.inf)
    # first breakpoint with a non-negative slope
    k = np.argmax(dphi >= 0, axis=1)
    none = ~(dphi >= 0).any(axis=1)
    m = np.arange(T.shape[0])
    t = np.empty(T.shape[0])
    # past the last breakpoint only the penalty bends
    last = np.isfinite(T).sum(axis=1) - 1
    tl, dl = Tf[m, last], dphi[m, last]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_tail = tl - dl / curv
        k1 = np.maximum(k - 1, 0)
        t0, t1 = Tf[m, k1], Tf[m, k]
        d0, d1 = dphi[m, k1], dphi[m, k]
        t_in = np.where(d1 > d0, t0 - d0 * (t1 - t0) / (d1 - d0), t1)
    t[:] = np.where(none, t_tail, np.where(k == 0, 0.0, t_in))
    return np.where(np.isfinite(t) & (t >= 0), t, 1.0)


def solve_modes(
    batch: ClusterBatch,
    beta,
    psi,
    omega: float,
    tau: float,
    U0=None,
    tol: float = MODE_TOL,
    max_iter: int = MAX_MODE_ITER,
) -> ModeSolution:
    """Minimize ``h`` for every cluster by Gauss-Newton with a line search.

    The direction freezes the piecewise coefficients ``A, b`` (a ridge
    solve). The step length minimizes ``h`` exactly along the direction with
    the model linearized, which stops at the first residual to enter the band
    instead of overshooting; it is halved while the true ``h`` does not
    decrease. Only clusters still searching are re-evaluated.
    """
    tau = check_tau(tau)
    q, M = batch.q, batch.M
    Delta = precision_factor(psi)
    Pinv = Delta.T @ Delta
    U = np.zeros((M, q)) if U0 is None else np.array(U0, dtype=float).reshape(M, q)
    h, g, JtAJ, r, J, s = _state(batch, beta, U, Delta, omega, tau)
    stalled = np.zeros(M, dtype=bool)
    flat = np.zeros(M, dtype=bool)
    it = 0
    for it in range(1, max_iter + 1):
        active = (np.abs(g).max(axis=1) > tol * np.maximum(1.0, np.abs(h))) & ~stalled & ~flat
        if not active.any():
            it -= 1
            break
        idx = np.flatnonzero(active)
        try:
            delta = -np.linalg.solve(
                (2.0 / omega) * JtAJ[idx] + 2.0 * Pinv, g[idx][:, :, None]
            )[:, :, 0]
        except np.linalg.LinAlgError as exc:
            raise NumericalError("singular Gauss-Newton system") from exc
        prow, pmask = batch.pad_rows[idx], batch.pad_mask[idx]
        V = np.einsum("mnq,mq->mn", J[prow], delta)
        step = _line_minimum(r[prow], V, pmask, U[idx], delta, Pinv, omega, tau)
        pending = np.ones(idx.size, dtype=bool)
        for _ in range(MAX_HALVINGS + 1):
            sub = idx[pending]
            trial = U[sub] + step[pending, None] * delta[pending]
            try:
                ht = _evaluate(batch, beta, sub, trial, Delta, omega, tau, jac=False)
                ok = np.isfinite(ht) & (ht <= h[sub])
            except ModelDomainError:
                ok = np.zeros(sub.size, dtype=bool)
            U[sub[ok]] = trial[ok]
            pending[np.flatnonzero(pending)[ok]] = False
            if not pending.any():
                break
            step[pending] *= 0.5
        stalled[idx[pending]] = True
        h_old = h[idx]
        rows = batch.rows(idx)
        h[idx], g[idx], JtAJ[idx], r[rows], J[rows], s[rows] = _evaluate(
            batch, beta, idx, U[idx], Delta, omega, tau
        )
        # progress can become linear at a kink; stop once h stops moving
        flat[idx] |= (h_old - h[idx]) <= FLAT_TOL * np.maximum(1.0, np.abs(h[idx]))
    converged = (np.abs(g).max(axis=1) <= tol * np.maximum(1.0, np.abs(h))) | (flat & ~stalled)
    return ModeSolution(U, h, g, JtAJ, it, converged, stalled & ~converged, r, J, s)


# ---------------------------------------------------------------------------
# Single-cluster interface
# ---------------------------------------------------------------------------


@dataclass
class ClusterState:
    u: np.ndarray
    r: np.ndarray
    coeffs: QuadCoeffs
    h_value: float
    hess: np.ndarray  # half the Gauss-Newton Hessian of h
    jac: np.ndarray
    iterations: int = 0
    converged: bool = True
    stalled: bool = False


def _single(model, design, cluster):
    if isinstance(cluster, ClusteredDataset):
        if cluster.M != 1:
            raise ValueError("expected a single cluster")
        ds = cluster
    else:
        ds = ClusteredDataset([cluster])
    return ClusterBatch(ds, model, design)


def _as_u(u, q):
    return np.asarray(u, dtype=float).reshape(1, q)


def h_eval(model, design, cluster: Cluster, beta, psi, u, omega, tau) -> float:
    """``r'Ar/omega + b'r + c'1 + u' inv(Psi) u`` with coefficients at the current residuals."""
    tau = check_tau(tau)
    batch = _single(model, design, cluster)
    U = _as_u(u, batch.q)
    r = batch.y - batch.fitted(beta, U)
    return float(_h_values(batch, r, U, precision_factor(psi), omega, tau)[0][0])


def h_grad(model, design, cluster: Cluster, beta, psi, u, omega, tau) -> np.ndarray:
    tau = check_tau(tau)
    batch = _single(model, design, cluster)
    U = _as_u(u, batch.q)
    return _state(batch, beta, U, precision_factor(psi), omega, tau)[1][0]


def h_hess_gn(model, design, cluster: Cluster, beta, psi, u, omega, tau) -> np.ndarray:
    """Gauss-Newton Hessian ``(2/omega) J'AJ + 2 inv(Psi)`` (twice the Laplace curvature)."""
    tau = check_tau(tau)
    batch = _single(model, design, cluster)
    U = _as_u(u, batch.q)
    Delta = precision_factor(psi)
    JtAJ = _state(batch, beta, U, Delta, omega, tau)[2][0]
    H = (2.0 / omega) * JtAJ + 2.0 * Delta.T @ Delta
    return 0.5 * (H + H.T)


def solve_mode(
    model, design, cluster: Cluster, beta, psi, omega, tau, u_start=None,
    tol: float = MODE_TOL, max_iter: int = MAX_MODE_ITER,
) -> ClusterState:
    """Conditional mode of one cluster's random effects."""
    batch = _single(model, design, cluster)
    U0 = None if u_start is None else _as_u(u_start, batch.q)
    sol = solve_modes(batch, beta, psi, omega, tau, U0, tol, max_iter)
    a, b, c = _abc(float(tau), float(omega), sol.s)
    Delta = precision_factor(psi)
    return ClusterState(
        u=sol.U[0],
        r=sol.r,
        coeffs=QuadCoeffs(a, b, c, sol.s),
        h_value=float(sol.h[0]),
        hess=sol.JtAJ[0] / omega + Delta.T @ Delta,
        jac=sol.J,
        iterations=sol.iterations,
        converged=bool(sol.converged[0]),
        stalled=bool(sol.stalled[0]),
    )
