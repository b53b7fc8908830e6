"""Derivative-free unconstrained minimizers with a shared report format.

``minimize_quasi_newton`` is BFGS on forward-difference gradients with an
Armijo backtracking line search; ``minimize_simplex`` is Nelder-Mead. Both
are deterministic and never return a point worse than the start.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

CONVERGED = "converged"
MAX_EVALS = "max-evals"
LINE_SEARCH_FAILURE = "line-search-failure"
NON_FINITE = "non-finite"
FAILURES = frozenset({LINE_SEARCH_FAILURE, NON_FINITE})


@dataclass
class OptimizerReport:
    x_best: np.ndarray
    f_best: float
    evaluations: int
    status: str
    iterations: int = 0
    method: str = ""

    @property
    def failed(self) -> bool:
        return self.status in FAILURES


class _Counted:
    def __init__(self, fun, max_evals):
        self.fun = fun
        self.n = 0
        self.max_evals = max_evals

    def __call__(self, x) -> float:
        self.n += 1
        v = float(self.fun(x))
        return v if np.isfinite(v) else np.inf

    @property
    def exhausted(self):
        return self.n >= self.max_evals


def fd_gradient(fun, x, fx, rel_step=1e-7):
    """Forward-difference gradient with step ``rel_step * max(1, |x_k|)``."""
    g = np.empty_like(x)
    for k in range(x.size):
        h = rel_step * max(1.0, abs(x[k]))
        xk = x.copy()
        xk[k] += h
        h = xk[k] - x[k]
        g[k] = (fun(xk) - fx) / h
    return g


def minimize_quasi_newton(
    objective: Callable[[np.ndarray], float],
    x_start,
    *,
    gtol: float = 1e-6,
    ftol: float = 1e-10,
    max_iter: int = 100,
    max_evals: int = 5000,
    fd_step: float = 1e-7,
    c1: float = 1e-4,
    max_backtracks: int = 40,
    callback: Optional[Callable[[np.ndarray], None]] = None,
) -> OptimizerReport:
    """BFGS with forward-difference gradients.

    Converges when ``max|grad| < gtol * max(1, |f|)`` or the relative change in
    ``f`` over an accepted step drops below ``ftol``.
    """
    fun = _Counted(objective, max_evals)
    x = np.array(x_start, dtype=float).reshape(-1)
    f = fun(x)
    if not np.isfinite(f):
        return OptimizerReport(x.copy(), np.nan, fun.n, NON_FINITE, 0, "quasi-newton")

    def report(status, it):
        return OptimizerReport(x.copy(), f, fun.n, status, it, "quasi-newton")

    n = x.size
    g = fd_gradient(fun, x, f, fd_step)
    if not np.all(np.isfinite(g)):
        return report(NON_FINITE, 0)
    Hinv = np.eye(n)
    fresh = True
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) < gtol * max(1.0, abs(f)):
            return report(CONVERGED, it - 1)
        if fun.exhausted:
            return report(MAX_EVALS, it - 1)
        p = -Hinv @ g
        slope = g @ p
        if slope >= 0:
            Hinv, fresh = np.eye(n), True
            p, slope = -g, -(g @ g)
        alpha = 1.0
        if fresh:
            alpha = min(1.0, max(1.0, np.max(np.abs(x))) / max(np.max(np.abs(p)), 1e-300))
        accepted = False
        for _ in range(max_backtracks):
            x_new = x + alpha * p
            f_new = fun(x_new)
            if f_new <= f + c1 * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            if not fresh:
                # retry from steepest descent before giving up
                Hinv, fresh = np.eye(n), True
                continue
            return report(LINE_SEARCH_FAILURE, it)
        step = x_new - x
        f_old = f
        x, f = x_new, f_new
        if callback is not None:
            callback(x)
        if abs(f_old - f) <= ftol * max(abs(f_old), abs(f), 1e-300):
            return report(CONVERGED, it)
        g_new = fd_gradient(fun, x, f, fd_step)
        if not np.all(np.isfinite(g_new)):
            return report(NON_FINITE, it)
        y = g_new - g
        sy = step @ y
        if sy > 1e-10 * np.linalg.norm(step) * np.linalg.norm(y):
            if fresh:
                Hinv = np.eye(n) * (sy / (y @ y))
            rho = 1.0 / sy
            V = np.eye(n) - rho * np.outer(step, y)
            Hinv = V @ Hinv @ V.T + rho * np.outer(step, step)
            fresh = False
        g = g_new
    return report(MAX_EVALS, max_iter)


def minimize_simplex(
    objective: Callable[[np.ndarray], float],
    x_start,
    *,
    ftol: float = 1e-8,
    max_evals: int = 2000,
    edge: float = 0.1,
    callback: Optional[Callable[[np.ndarray], None]] = None,
) -> OptimizerReport:
    """Nelder-Mead (reflection 1, expansion 2, contraction 0.5, shrink 0.5).

    Non-finite values count as ``+inf``. Converges when the spread of values
    over the simplex is below ``ftol * max(1, |f_best|)``.
    """
    fun = _Counted(objective, max_evals)
    x0 = np.array(x_start, dtype=float).reshape(-1)
    f0 = fun(x0)
    if not np.isfinite(f0):
        return OptimizerReport(x0, np.nan, fun.n, NON_FINITE, 0, "simplex")
    n = x0.size
    pts = np.tile(x0, (n + 1, 1))
    for k in range(n):
        pts[k + 1, k] += edge * max(1.0, abs(x0[k]))
    vals = np.array([f0] + [fun(p) for p in pts[1:]])
    it = 0
    status = MAX_EVALS
    while not fun.exhausted:
        order = np.argsort(vals, kind="stable")
        pts, vals = pts[order], vals[order]
        if callback is not None and it:
            callback(pts[0])
        if vals[-1] - vals[0] < ftol * max(1.0, abs(vals[0])):
            status = CONVERGED
            break
        it += 1
        centroid = pts[:-1].mean(axis=0)
        worst = pts[-1]
        xr = centroid + (centroid - worst)
        fr = fun(xr)
        if fr < vals[0]:
            xe = centroid + 2.0 * (centroid - worst)
            fe = fun(xe)
            if fe < fr:
                pts[-1], vals[-1] = xe, fe
            else:
                pts[-1], vals[-1] = xr, fr
            continue
        if fr < vals[-2]:
            pts[-1], vals[-1] = xr, fr
            continue
        if fr < vals[-1]:
            xc = centroid + 0.5 * (xr - centroid)
            fc = fun(xc)
            if fc <= fr:
                pts[-1], vals[-1] = xc, fc
                continue
        else:
            xc = centroid + 0.5 * (worst - centroid)
            fc = fun(xc)
            if fc < vals[-1]:
                pts[-1], vals[-1] = xc, fc
                continue
        pts[1:] = pts[0] + 0.5 * (pts[1:] - pts[0])
        vals[1:] = [fun(p) for p in pts[1:]]
    best = int(np.argmin(vals))
    return OptimizerReport(pts[best].copy(), float(vals[best]), fun.n, status, it, "simplex")


METHODS = {"quasi-newton": minimize_quasi_newton, "simplex": minimize_simplex}
