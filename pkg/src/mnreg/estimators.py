"""scikit-learn style wrappers around the functional pipeline.

All estimators standardize internally and report coefficients in the units
of the columns passed to ``fit``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.feature_selection import SelectorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .baselines import desparsified_lasso
from .blanket import estimate_blankets
from .datagen import Dataset, standardize
from .mnr import MnrConfig, run_mnr
from .select import DEFAULT_PARAM, PenaltySpec, bic_select, fit_penalized


def _dataset(X, y, family, event):
    X, y = check_X_y(X, y, dtype=float, y_numeric=True)
    if event is not None:
        event = np.asarray(event, dtype=float).ravel()
    return standardize(Dataset(X, y, family, event))


class MarkovNeighborhoodRegression(SelectorMixin, BaseEstimator):
    """Per-coefficient confidence intervals and p-values from subset regressions.

    After ``fit``: ``coef_``, ``se_``, ``ci_`` (p x 2), ``pvalues_``,
    ``pvalues_holm_``, ``pvalues_bh_``, ``report_`` (the full
    :class:`~mnreg.mnr.MnrReport`). As a selector, ``transform`` keeps the
    columns whose BH-adjusted p-value is below ``alpha``.
    """

    def __init__(self, family="gaussian", selection="sis_then_scad", blanket="nodewise",
                 mode="full", level=0.95, alpha=0.05, screen_cap=None, model_cap=None,
                 blanket_cap=None, screen_rounds=1, ebic_gamma=0.0):
        self.family = family
        self.selection = selection
        self.blanket = blanket
        self.mode = mode
        self.level = level
        self.alpha = alpha
        self.screen_cap = screen_cap
        self.model_cap = model_cap
        self.blanket_cap = blanket_cap
        self.screen_rounds = screen_rounds
        self.ebic_gamma = ebic_gamma

    def _config(self) -> MnrConfig:
        return MnrConfig(selection=self.selection, blanket=self.blanket, mode=self.mode,
                         level=self.level, alpha=self.alpha, screen_cap=self.screen_cap,
                         model_cap=self.model_cap, blanket_cap=self.blanket_cap,
                         screen_rounds=self.screen_rounds, ebic_gamma=self.ebic_gamma)

    def fit(self, X, y, event=None):
        ds = _dataset(X, y, self.family, event)
        rep = run_mnr(ds, self._config())
        self.report_ = rep
        self.coef_ = rep.column("beta_hat")
        self.se_ = rep.column("se")
        self.ci_ = np.column_stack([rep.column("ci_low"), rep.column("ci_high")])
        self.pvalues_ = rep.p_values
        self.pvalues_holm_ = rep.p_holm
        self.pvalues_bh_ = rep.p_bh
        self.selected_ = rep.selection.active
        self.n_features_in_ = ds.p
        return self

    def _get_support_mask(self):
        check_is_fitted(self, "pvalues_bh_")
        return np.nan_to_num(self.pvalues_bh_, nan=1.0) < self.alpha


class PenalizedRegression(RegressorMixin, BaseEstimator):
    """Lasso / SCAD / MCP for gaussian, binomial or Cox responses.

    With ``lam=None`` lambda is chosen by BIC along a 100-point path.
    ``predict`` returns the linear predictor (the mean for gaussian).
    """

    def __init__(self, penalty="lasso", family="gaussian", lam=None, param=None):
        self.penalty = penalty
        self.family = family
        self.lam = lam
        self.param = param

    def fit(self, X, y, event=None):
        ds = _dataset(X, y, self.family, event)
        param = DEFAULT_PARAM[self.penalty] if self.param is None else self.param
        if self.lam is None:
            coef, b0, lam, _ = bic_select(ds, np.ascontiguousarray(ds.X), self.penalty,
                                          param=param)
        else:
            fit = fit_penalized(ds, PenaltySpec(self.penalty, float(self.lam), param))
            coef, b0, lam = fit.coef, fit.intercept, fit.lam
        self.coef_ = coef / ds.scale
        self.intercept_ = float(b0 - self.coef_ @ ds.center)
        self.lambda_ = float(lam)
        self.n_features_in_ = ds.p
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=float)
        return self.intercept_ + X @ self.coef_


class DesparsifiedLasso(BaseEstimator):
    """Bias-corrected lasso intervals (gaussian only).

    After ``fit``: ``coef_`` (bias-corrected), ``lasso_coef_``, ``se_``,
    ``ci_``, ``pvalues_``, ``degenerate_``.
    """

    def __init__(self, level=0.95, dfmax=None):
        self.level = level
        self.dfmax = dfmax

    def fit(self, X, y):
        ds = _dataset(X, y, "gaussian", None)
        res = desparsified_lasso(ds, self.level, self.dfmax)
        self.result_ = res
        self.coef_ = res.beta_bc
        self.lasso_coef_ = res.beta_lasso
        self.se_ = res.se
        self.ci_ = np.column_stack([res.ci_low, res.ci_high])
        self.pvalues_ = res.p_value
        self.degenerate_ = list(res.degenerate)
        self.n_features_in_ = ds.p
        return self


class MarkovBlanketEstimator(BaseEstimator):
    """Estimate a Markov blanket for every column of ``X`` (``y`` ignored).

    After ``fit``: ``blankets_`` (:class:`~mnreg.blanket.BlanketMap`) and
    ``adjacency_`` (boolean p x p, symmetric for nodewise).
    """

    def __init__(self, method="nodewise", cap=None):
        self.method = method
        self.cap = cap

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        ds = standardize(Dataset(X, np.zeros(X.shape[0])))
        bm = estimate_blankets(ds.X, self.method, self.cap)
        adj = np.zeros((ds.p, ds.p), dtype=bool)
        for j, nb in enumerate(bm.neighbors):
            adj[j, list(nb)] = True
        self.blankets_ = bm
        self.adjacency_ = adj
        self.n_features_in_ = ds.p
        return self
