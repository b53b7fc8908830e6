"""scikit-learn style wrappers around ``fit`` and ``nlrq_fit``."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .core import ClusteredDataset, VarianceSpec, check_tau
from .fitter import FitControl, fit, nlrq_fit
from .model import DesignMap, PhiTerm, get_model, identity_design


def _design(model, terms, random) -> DesignMap:
    if terms is not None:
        return DesignMap.from_terms([t if isinstance(t, PhiTerm) else PhiTerm(**t) for t in terms])
    return identity_design(model.s, random)


def _control(est) -> FitControl:
    return FitControl(
        max_outer=est.max_outer,
        loglik_rel_tol=est.loglik_rel_tol,
        gamma=est.gamma,
        omega0=est.omega0,
    )


def _predict(model, design, beta, X, U=None) -> np.ndarray:
    F, G = design.build(X)
    phi = np.einsum("nsp,p->ns", F, beta)
    if U is not None:
        phi = phi + np.einsum("nsq,nq->ns", G, U)
    with np.errstate(all="ignore"):
        return model.f(phi, X)


class NLQMMRegressor(RegressorMixin, BaseEstimator):
    """Nonlinear quantile mixed model at one quantile level.

    ``X`` holds the covariate columns (column 0 drives the builtin models)
    and ``groups`` the cluster labels passed to ``fit``. By default each
    component of the model parameter gets one fixed effect and the components
    listed in ``random`` get a random shift; ``terms`` (a list of
    ``PhiTerm`` or dicts) overrides this. ``beta_start`` is required.
    """

    def __init__(
        self,
        model: str = "logistic4",
        tau: float = 0.5,
        random: Sequence[int] = (0,),
        terms: Optional[list] = None,
        variance: str = "diagonal",
        beta_start=None,
        gamma: float = 0.5,
        omega0: Optional[float] = None,
        loglik_rel_tol: float = 1e-4,
        max_outer: int = 500,
    ):
        self.model = model
        self.tau = tau
        self.random = random
        self.terms = terms
        self.variance = variance
        self.beta_start = beta_start
        self.gamma = gamma
        self.omega0 = omega0
        self.loglik_rel_tol = loglik_rel_tol
        self.max_outer = max_outer

    def fit(self, X, y, groups=None):
        X, y = check_X_y(X, y, y_numeric=True)
        if groups is None:
            raise ValueError("groups is required")
        groups = np.asarray(groups)
        if groups.shape[0] != X.shape[0]:
            raise ValueError("groups must have one label per row of X")
        if self.beta_start is None:
            raise ValueError("beta_start is required")
        check_tau(self.tau)
        model = get_model(self.model)
        design = _design(model, self.terms, self.random)
        data = ClusteredDataset.from_arrays(y, X, groups)
        spec = VarianceSpec(self.variance, design.q)
        res = fit(data, model, design, spec, self.tau, self.beta_start, _control(self))
        self.result_ = res
        self.coef_ = res.beta
        self.psi_ = res.psi
        self.sigma_ = res.sigma
        self.covariance_ = res.sigma_cov
        self.random_effects_ = dict(zip(res.cluster_ids, res.u_modes))
        self.converged_ = res.converged
        self.n_features_in_ = X.shape[1]
        self._model, self._design = model, design
        return self

    def predict(self, X, groups=None):
        """Quantile predictions; with ``groups``, known clusters use their modes."""
        check_is_fitted(self, "coef_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        U = None
        if groups is not None:
            q = self._design.q
            U = np.array(
                [self.random_effects_.get(g, np.zeros(q)) for g in np.asarray(groups).tolist()]
            ).reshape(X.shape[0], q)
        return _predict(self._model, self._design, self.coef_, X, U)


class NLRQRegressor(RegressorMixin, BaseEstimator):
    """Nonlinear quantile regression for independent data, by the same smoothing."""

    def __init__(
        self,
        model: str = "logistic4",
        tau: float = 0.5,
        terms: Optional[list] = None,
        beta_start=None,
        gamma: float = 0.5,
        omega0: Optional[float] = None,
        loglik_rel_tol: float = 1e-4,
        max_outer: int = 500,
    ):
        self.model = model
        self.tau = tau
        self.terms = terms
        self.beta_start = beta_start
        self.gamma = gamma
        self.omega0 = omega0
        self.loglik_rel_tol = loglik_rel_tol
        self.max_outer = max_outer

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        if self.beta_start is None:
            raise ValueError("beta_start is required")
        check_tau(self.tau)
        model = get_model(self.model)
        design = _design(model, self.terms, ())
        data = ClusteredDataset.from_arrays(y, X, np.zeros(len(y), dtype=int))
        res = nlrq_fit(data, model, design, self.tau, self.beta_start, _control(self))
        self.result_ = res
        self.coef_ = res.beta
        self.converged_ = res.converged
        self.n_features_in_ = X.shape[1]
        self._model, self._design = model, design
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return _predict(self._model, self._design, self.coef_, X)
