"""Log-likelihood pieces for the logistic and Cox (Breslow) models."""
from __future__ import annotations

import numpy as np
from scipy.special import expit


def logistic_loglik(eta, y) -> float:
    # log(1 + e^eta) computed stably
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def logistic_working(eta, y, floor=1e-5):
    """IRLS weights and working response at linear predictor ``eta``."""
    mu = expit(eta)
    w = np.maximum(mu * (1.0 - mu), floor)
    return w, eta + (y - mu) / w


class CoxRisk:
    """Risk-set bookkeeping for the Breslow partial likelihood.

    Times are sorted once; every risk set ``{k : t_k >= t_i}`` is a suffix of
    the sorted order starting at the first member of ``t_i``'s tie group.
    """

    def __init__(self, time, event):
        time = np.asarray(time, dtype=float)
        self.event = np.asarray(event, dtype=float)
        self.order = np.argsort(time, kind="stable")
        self.sorted_time = time[self.order]
        self.n = time.shape[0]
        # first sorted position of each subject's tie group, in sorted order
        self.start = np.searchsorted(self.sorted_time, self.sorted_time, side="left")
        self.d_sorted = self.event[self.order]
        self.n_events = int(self.event.sum())

    def _rev_cumsum(self, a):
        return np.cumsum(a[::-1], axis=0)[::-1]

    def _risk_sums(self, a_sorted):
        """Sum of ``a`` over each sorted subject's risk set."""
        return self._rev_cumsum(a_sorted)[self.start]

    def _event_cumsum(self, c_sorted):
        """For each sorted subject k: sum over events i with t_i <= t_k of c_i."""
        cs = np.cumsum(c_sorted)
        # last sorted position sharing subject k's time
        end = np.searchsorted(self.sorted_time, self.sorted_time, side="right") - 1
        return cs[end]

    def loglik(self, eta) -> float:
        eta = np.asarray(eta, dtype=float)
        shift = eta.max()
        es = np.exp(eta[self.order] - shift)
        S = self._risk_sums(es)
        d = self.d_sorted
        return float(np.sum(d * (eta[self.order] - shift - np.log(S))))

    def eta_derivatives(self, eta):
        """Gradient and diagonal Hessian of the log partial likelihood in ``eta``."""
        eta = np.asarray(eta, dtype=float)
        shift = eta.max()
        es = np.exp(eta[self.order] - shift)
        S = self._risk_sums(es)
        d = self.d_sorted
        A = self._event_cumsum(d / S)
        B = self._event_cumsum(d / S ** 2)
        g_sorted = d - es * A
        h_sorted = -(es * A - es ** 2 * B)
        g = np.empty(self.n)
        h = np.empty(self.n)
        g[self.order] = g_sorted
        h[self.order] = h_sorted
        return g, h

    def working(self, eta, floor=1e-5):
        g, h = self.eta_derivatives(eta)
        w = np.maximum(-h, floor)
        return w, eta + g / w

    def grad_hess(self, X, beta):
        """Log partial likelihood, its gradient and Hessian in ``beta``."""
        X = np.asarray(X, dtype=float)
        eta = X @ beta
        shift = eta.max()
        Xs = X[self.order]
        es = np.exp(eta[self.order] - shift)
        d = self.d_sorted
        ev = d > 0
        S0 = self._risk_sums(es)[ev]
        S1 = self._risk_sums(es[:, None] * Xs)[ev]
        S2 = self._risk_sums(es[:, None, None] * (Xs[:, :, None] * Xs[:, None, :]))[ev]
        xbar = S1 / S0[:, None]
        ll = float(np.sum(eta[self.order][ev] - shift - np.log(S0)))
        grad = np.sum(Xs[ev] - xbar, axis=0)
        hess = -np.sum(S2 / S0[:, None, None] - xbar[:, :, None] * xbar[:, None, :], axis=0)
        return ll, grad, hess

    def score_statistics(self, X):
        """Per-column score test statistics of H0: beta_j = 0 (single-feature model)."""
        X = np.asarray(X, dtype=float)
        Xs = X[self.order]
        ev = self.d_sorted > 0
        S0 = (self.n - self.start)[ev].astype(float)
        S1 = self._risk_sums(Xs)[ev]
        S2 = self._risk_sums(Xs ** 2)[ev]
        m = S1 / S0[:, None]
        U = np.sum(Xs[ev] - m, axis=0)
        V = np.sum(S2 / S0[:, None] - m ** 2, axis=0)
        return U / np.sqrt(np.maximum(V, 1e-300))
