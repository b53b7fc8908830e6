"""Nonlinear quantile functions and the mixed-parameter design map.

Each observation's parameter is ``phi = F @ beta + G @ u``; the quantile is
``f(phi, x)``. Models are evaluated row-wise on stacked arrays: ``phi`` has
shape ``(n, s)`` and ``x`` shape ``(n, d)``; builtins read ``x[:, 0]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

from .core import InvalidParameterError, NumericalError

EXP_CLAMP = 700.0


class ModelDomainError(NumericalError):
    """The model cannot be evaluated at the requested parameter."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


@dataclass(frozen=True)
class ModelSpec:
    """A smooth nonlinear function of an ``s``-vector parameter.

    ``eval_f(phi, x)`` and ``dphi(phi, x)`` act on stacked rows and return
    shapes ``(n,)`` and ``(n, s)``. Without ``dphi`` the gradient is taken by
    central differences.
    """

    name: str
    s: int
    eval_f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    dphi: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    param_names: tuple = ()

    def f(self, phi, x) -> np.ndarray:
        phi, x = _rows(phi, self.s), _cov(x)
        return self.eval_f(phi, x)

    def grad(self, phi, x) -> np.ndarray:
        phi, x = _rows(phi, self.s), _cov(x)
        if self.dphi is not None:
            return self.dphi(phi, x)
        return fd_dphi(self.eval_f, phi, x)


def fd_dphi(eval_f, phi, x, rel_step=1e-6) -> np.ndarray:
    """Central-difference gradient of ``eval_f`` in ``phi``, row by row."""
    out = np.empty_like(phi)
    for k in range(phi.shape[1]):
        h = rel_step * np.maximum(1.0, np.abs(phi[:, k]))
        up, dn = phi.copy(), phi.copy()
        up[:, k] += h
        dn[:, k] -= h
        out[:, k] = (eval_f(up, x) - eval_f(dn, x)) / (2.0 * h)
    return out


def _rows(phi, s):
    phi = np.asarray(phi, dtype=float)
    if phi.ndim == 1:
        phi = phi.reshape(1, -1)
    if phi.shape[1] != s:
        raise InvalidParameterError(f"expected phi with {s} components, got {phi.shape[1]}")
    return phi


def _cov(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        return x.reshape(1, 1)
    if x.ndim == 1:
        return x.reshape(-1, 1)
    return x


def _scale_guard(scale):
    bad = np.flatnonzero(scale == 0)
    if bad.size:
        raise ModelDomainError("logistic scale parameter is zero", index=int(bad[0]))


# ---------------------------------------------------------------------------
# Builtin models
# ---------------------------------------------------------------------------


def _logistic4_f(phi, x):
    _scale_guard(phi[:, 2])
    g = expit((x[:, 0] - phi[:, 1]) / phi[:, 2])
    return (phi[:, 0] - phi[:, 3]) * g + phi[:, 3]


def _logistic4_d(phi, x):
    _scale_guard(phi[:, 2])
    t = x[:, 0]
    g = expit((t - phi[:, 1]) / phi[:, 2])
    amp = phi[:, 0] - phi[:, 3]
    w = amp * g * (1.0 - g) / phi[:, 2]
    return np.column_stack([g, -w, w * (phi[:, 1] - t) / phi[:, 2], 1.0 - g])


def builtin_logistic4() -> ModelSpec:
    """Four-parameter logistic ``(phi1 - phi4) / (1 + exp((phi2 - x) / phi3)) + phi4``."""
    return ModelSpec("logistic4", 4, _logistic4_f, _logistic4_d, ("asym", "mid", "scale", "offset"))


def _logistic3_f(phi, x):
    _scale_guard(phi[:, 2])
    return phi[:, 0] * expit((x[:, 0] - phi[:, 1]) / phi[:, 2])


def _logistic3_d(phi, x):
    _scale_guard(phi[:, 2])
    t = x[:, 0]
    g = expit((t - phi[:, 1]) / phi[:, 2])
    w = phi[:, 0] * g * (1.0 - g) / phi[:, 2]
    return np.column_stack([g, -w, w * (phi[:, 1] - t) / phi[:, 2]])


def builtin_logistic3() -> ModelSpec:
    """Three-parameter logistic ``phi1 / (1 + exp((phi2 - x) / phi3))``."""
    return ModelSpec("logistic3", 3, _logistic3_f, _logistic3_d, ("asym", "mid", "scale"))


def _decay(log_rate, t):
    rate = np.exp(np.minimum(log_rate, EXP_CLAMP))
    arg = -rate * t
    # arguments below -EXP_CLAMP evaluate to exactly zero
    return np.where(arg < -EXP_CLAMP, 0.0, np.exp(np.maximum(arg, -EXP_CLAMP))), rate


def _biexp_f(phi, x):
    t = x[:, 0]
    e1, _ = _decay(phi[:, 1], t)
    e2, _ = _decay(phi[:, 3], t)
    return phi[:, 0] * e1 + phi[:, 2] * e2


def _biexp_d(phi, x):
    t = x[:, 0]
    e1, k1 = _decay(phi[:, 1], t)
    e2, k2 = _decay(phi[:, 3], t)
    return np.column_stack([e1, -phi[:, 0] * e1 * k1 * t, e2, -phi[:, 2] * e2 * k2 * t])


def builtin_biexp() -> ModelSpec:
    """Biexponential ``phi1 exp(-exp(phi2) x) + phi3 exp(-exp(phi4) x)``."""
    return ModelSpec("biexp", 4, _biexp_f, _biexp_d, ("A1", "lrc1", "A2", "lrc2"))


BUILTINS = {
    "logistic4": builtin_logistic4,
    "logistic3": builtin_logistic3,
    "biexp": builtin_biexp,
}


def get_model(name: str) -> ModelSpec:
    try:
        return BUILTINS[name]()
    except KeyError:
        raise InvalidParameterError(
            f"unknown model {name!r}; choose from {sorted(BUILTINS)}"
        ) from None


# ---------------------------------------------------------------------------
# Design map
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhiTerm:
    """Fixed part ``intercept + sum_k beta_k * x[:, k]`` of one parameter component.

    ``random`` attaches one random effect (an additive shift) to the component.
    """

    covariates: tuple = ()
    intercept: bool = True
    random: bool = False


@dataclass(frozen=True)
class DesignMap:
    """Builds the per-observation ``F`` (s x p) and ``G`` (s x q) matrices."""

    s: int
    p: int
    q: int
    build_F: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    build_G: Callable[[np.ndarray], np.ndarray] = field(repr=False)

    def build(self, x):
        """Stacked design for covariate rows ``x``: ``(n, s, p)`` and ``(n, s, q)``."""
        x = _cov(x)
        return self.build_F(x), self.build_G(x)

    @classmethod
    def constant(cls, F, G) -> "DesignMap":
        F = np.atleast_2d(np.asarray(F, dtype=float))
        G = np.asarray(G, dtype=float)
        if G.ndim == 1:
            G = G.reshape(-1, 1)
        if F.shape[0] != G.shape[0]:
            raise InvalidParameterError("F and G must have the same number of rows")
        F.setflags(write=False)
        G.setflags(write=False)
        return cls(
            F.shape[0],
            F.shape[1],
            G.shape[1],
            lambda x: np.broadcast_to(F, (x.shape[0],) + F.shape),
            lambda x: np.broadcast_to(G, (x.shape[0],) + G.shape),
        )

    @classmethod
    def from_terms(cls, terms: Sequence[PhiTerm]) -> "DesignMap":
        terms = [t if isinstance(t, PhiTerm) else PhiTerm(**t) for t in terms]
        s = len(terms)
        layout = []  # (phi index, covariate column or None)
        for k, t in enumerate(terms):
            if t.intercept:
                layout.append((k, None))
            layout.extend((k, int(c)) for c in t.covariates)
        rand = [k for k, t in enumerate(terms) if t.random]
        if not layout:
            raise InvalidParameterError("design has no fixed effects")
        p, q = len(layout), len(rand)
        G0 = np.zeros((s, q))
        G0[rand, np.arange(q)] = 1.0

        def build_F(x):
            F = np.zeros((x.shape[0], s, p))
            for j, (k, col) in enumerate(layout):
                F[:, k, j] = 1.0 if col is None else x[:, col]
            return F

        return cls(s, p, q, build_F, lambda x: np.broadcast_to(G0, (x.shape[0], s, q)))


def identity_design(s: int, random: Sequence[int]) -> DesignMap:
    """``F = I_s`` with one random effect on each listed component."""
    return DesignMap.from_terms([PhiTerm(random=k in set(random)) for k in range(s)])


def eval_phi(design: DesignMap, beta, u, x_row) -> np.ndarray:
    """``F_ij beta + G_ij u`` for one covariate row."""
    beta = np.asarray(beta, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    if beta.shape[0] != design.p or u.shape[0] != design.q:
        raise InvalidParameterError(
            f"design expects p={design.p}, q={design.q}; got {beta.shape[0]}, {u.shape[0]}"
        )
    F, G = design.build(np.asarray(x_row, dtype=float).reshape(1, -1))
    return F[0] @ beta + G[0] @ u


def jac_u(model: ModelSpec, design: DesignMap, beta, u, x_rows) -> np.ndarray:
    """Jacobian of the cluster's quantile vector with respect to its random effects."""
    x = _cov(x_rows)
    F, G = design.build(x)
    phi = F @ np.asarray(beta, dtype=float) + G @ np.asarray(u, dtype=float)
    J = np.einsum("ns,nsq->nq", model.grad(phi, x), G)
    bad = np.flatnonzero(~np.all(np.isfinite(J), axis=1))
    if bad.size:
        raise ModelDomainError(f"non-finite derivative at observation {bad[0]}", index=int(bad[0]))
    return J
