"""Screening and penalized variable selection.

``select_variables`` is the default route to the reduced model: sure
independence screening down to ``screen_cap`` features, then a warm-started
Lasso/SCAD/MCP path on the survivors with the tuning parameter picked by BIC.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _cd
from .datagen import Dataset
from .exceptions import InvalidSpec, NoConvergence
from .glm import CoxRisk, logistic_loglik, logistic_working

PENALTY_CODES = {"lasso": _cd.LASSO, "scad": _cd.SCAD, "mcp": _cd.MCP}
DEFAULT_PARAM = {"lasso": 0.0, "scad": 3.7, "mcp": 3.0}
METHODS = ("sis", "lasso", "scad", "mcp", "sis_then_lasso", "sis_then_scad", "sis_then_mcp")

MAX_SWEEPS = 10_000
CD_TOL = 1e-9
IRLS_TOL = 1e-6
IRLS_MAX = 100
# path stops once the fractional RSS/deviance drop between points is below this
PATH_MIN_CHANGE = 1e-5


@dataclass(frozen=True)
class PenaltySpec:
    kind: str
    lam: float
    param: float | None = None

    def __post_init__(self):
        if self.kind not in PENALTY_CODES:
            raise InvalidSpec(f"unknown penalty {self.kind!r}")
        if not self.lam > 0:
            raise InvalidSpec("lambda must be positive")
        if self.param is None:
            object.__setattr__(self, "param", DEFAULT_PARAM[self.kind])
        if self.kind == "scad" and not self.param > 2:
            raise InvalidSpec("SCAD needs a > 2")
        if self.kind == "mcp" and not self.param > 1:
            raise InvalidSpec("MCP needs gamma > 1")


@dataclass
class PenalizedFit:
    coef: np.ndarray
    intercept: float
    lam: float
    n_iter: int


@dataclass
class SelectionResult:
    """Estimated active set (0-based column indices, ordered as returned)."""

    active: np.ndarray
    method: str
    lambda_path_used: np.ndarray = field(default_factory=lambda: np.zeros(0))
    coefficients: np.ndarray | None = None
    lam: float | None = None

    def to_dict(self) -> dict:
        return {
            "active": [int(j) for j in self.active],
            "method": self.method,
            "lambda": self.lam,
        }


# SIS screening size is n / (k log n); binomial uses k = 4 because strong
# signals put larger logistic models close to separation
_SCREEN_DIVISOR = {"gaussian": 1, "binomial": 4, "cox": 1}


def screen_cap_default(n: int, family: str = "gaussian") -> int:
    return max(1, int(math.floor(n / (_SCREEN_DIVISOR[family] * math.log(n)))))


def model_cap_default(n: int) -> int:
    return max(1, int(math.floor(math.sqrt(n))) - 1)


def screening_cap_default(n: int) -> int:
    """Cap used by the screening-based variant: floor(sqrt(n) / log n)."""
    return max(1, int(math.floor(math.sqrt(n) / math.log(n))))


def top_k(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, ties to the lower index."""
    scores = np.asarray(scores, dtype=float)
    k = min(k, scores.shape[0])
    # stable sort on -score keeps lower indices first among ties
    return np.argsort(-scores, kind="stable")[:k]


def marginal_scores(ds: Dataset) -> np.ndarray:
    """|marginal association| of each column with the response."""
    X = ds.X
    if ds.family == "cox":
        return np.abs(CoxRisk(ds.y, ds.event).score_statistics(X))
    yc = ds.y - ds.y.mean()
    Xc = X - X.mean(axis=0)
    num = Xc.T @ yc
    den = np.sqrt((Xc ** 2).sum(axis=0) * (yc @ yc))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(den > 0, num / den, 0.0)
    # for 0/1 responses this is the standardized single-feature score statistic
    return np.abs(r)


def sis_screen(ds: Dataset, cap: int) -> SelectionResult:
    active = top_k(marginal_scores(ds), cap)
    return SelectionResult(active=np.sort(active), method="sis")


# -- penalized fits -----------------------------------------------------------

def _null_gradient(ds: Dataset, X) -> np.ndarray:
    n = X.shape[0]
    if ds.family == "cox":
        g, _ = CoxRisk(ds.y, ds.event).eta_derivatives(np.zeros(n))
        return X.T @ g / n
    return X.T @ (ds.y - ds.y.mean()) / n


def lambda_max(ds: Dataset, X=None) -> float:
    """Smallest lambda with an all-zero solution, nudged up by a relative 1e-10
    so rounding in the first coordinate update cannot leave a tiny nonzero."""
    X = ds.X if X is None else X
    return float(np.max(np.abs(_null_gradient(ds, X)))) * (1.0 + 1e-10)


def lambda_path(lmax: float, n_lambda: int = 100, ratio: float = 1e-3) -> np.ndarray:
    return lmax * np.logspace(0.0, math.log10(ratio), n_lambda)


def _xwx(X, w):
    return (w[:, None] * X * X).sum(axis=0) / X.shape[0]


def penalty_value(beta, lam, kind: str, param=None) -> float:
    """Total penalty ``sum_j pen(beta_j)``."""
    gam = DEFAULT_PARAM[kind] if param is None else param
    a = np.abs(np.asarray(beta, dtype=float))
    if kind == "lasso":
        return float(lam * a.sum())
    if kind == "scad":
        v = np.where(a <= lam, lam * a,
                     np.where(a <= gam * lam, (2 * gam * lam * a - a * a - lam * lam) / (2 * (gam - 1)),
                              lam * lam * (gam + 1) / 2))
        return float(v.sum())
    v = np.where(a <= gam * lam, lam * a - a * a / (2 * gam), gam * lam * lam / 2)
    return float(v.sum())


_KIND_NAMES = {v: k for k, v in PENALTY_CODES.items()}


def _glm_objective(ds, X, b0, beta, lam, kind, gam, risk):
    eta = b0 + X @ beta
    ll = logistic_loglik(eta, ds.y) if ds.family == "binomial" else risk.loglik(eta)
    return -ll / X.shape[0] + penalty_value(beta, lam, _KIND_NAMES[kind], gam)


def _solve_glm(ds: Dataset, X, lam, kind, gam, beta, b0, risk=None, hist=None):
    """Penalized IRLS for binomial/Cox at one lambda; ``beta`` updated in place.

    Each outer step solves the weighted quadratic approximation by coordinate
    descent, then halves the step until the penalized objective does not
    increase. With a nonconvex penalty the local model's minimizer can jump
    across a kink and stop being a descent direction; binomial fits then
    switch to the global curvature bound w = 1/4, whose surrogate majorizes
    the loss, so every later step descends (MM). Cox fits stop at such a point.
    """
    binom = ds.family == "binomial"
    hist = np.zeros(0) if hist is None else hist
    total = 0
    majorize = False
    f_old = _glm_objective(ds, X, b0, beta, lam, kind, gam, risk)
    limit = IRLS_MAX
    it = 0
    while it < limit:
        it += 1
        eta = b0 + X @ beta
        if majorize:
            w = np.full(X.shape[0], 0.25)
            z = eta + (ds.y - 1.0 / (1.0 + np.exp(-eta))) / 0.25
        elif binom:
            w, z = logistic_working(eta, ds.y)
        else:
            w, z = risk.working(eta)
        old, old_b0 = beta.copy(), b0
        b0, sweeps, ok = _cd.cd_solve(X, z, w, _xwx(X, w), beta, b0, lam, kind, gam,
                                      binom, CD_TOL, MAX_SWEEPS, hist)
        total += sweeps
        if not ok:
            raise NoConvergence(f"coordinate descent did not converge in {MAX_SWEEPS} sweeps")
        f_new = _glm_objective(ds, X, b0, beta, lam, kind, gam, risk)
        if not majorize:
            new, new_b0 = beta.copy(), b0
            t = 1.0
            while not f_new <= f_old + 1e-12 * abs(f_old) and t > 1e-6:
                t /= 2.0
                beta[:] = old + t * (new - old)
                b0 = old_b0 + t * (new_b0 - old_b0)
                f_new = _glm_objective(ds, X, b0, beta, lam, kind, gam, risk)
            if not f_new <= f_old + 1e-12 * abs(f_old):
                beta[:] = old
                b0 = old_b0
                if not binom:
                    return b0, total
                majorize = True
                limit = it + 10 * IRLS_MAX
                continue
        f_old = f_new
        if max(np.max(np.abs(beta - old), initial=0.0), abs(b0 - old_b0)) < IRLS_TOL:
            return b0, total
    raise NoConvergence(f"penalized IRLS did not converge in {limit} iterations")


def fit_penalized(ds: Dataset, pen: PenaltySpec, warm: PenalizedFit | None = None) -> PenalizedFit:
    """Penalized fit at a single lambda (coordinate descent, IRLS for GLMs)."""
    X = ds.X
    kind = PENALTY_CODES[pen.kind]
    beta = np.zeros(ds.p) if warm is None else warm.coef.copy()
    if ds.family == "gaussian":
        b0 = ds.y.mean() if warm is None else warm.intercept
        w = np.ones(ds.n)
        b0, sweeps, ok = _cd.cd_solve(X, ds.y, w, _xwx(X, w), beta, b0, pen.lam, kind,
                                      pen.param, True, CD_TOL, MAX_SWEEPS, np.zeros(0))
        if not ok:
            raise NoConvergence(f"coordinate descent did not converge in {MAX_SWEEPS} sweeps")
        return PenalizedFit(beta, float(b0), pen.lam, sweeps)
    if ds.family == "binomial":
        ybar = ds.y.mean()
        b0 = math.log(ybar / (1 - ybar)) if warm is None else warm.intercept
        b0, it = _solve_glm(ds, X, pen.lam, kind, pen.param, beta, b0)
        return PenalizedFit(beta, float(b0), pen.lam, it)
    risk = CoxRisk(ds.y, ds.event)
    _, it = _solve_glm(ds, X, pen.lam, kind, pen.param, beta, 0.0, risk=risk)
    return PenalizedFit(beta, 0.0, pen.lam, it)


def deviance(ds: Dataset, X, b0, beta, risk=None) -> float:
    eta = b0 + X @ beta
    if ds.family == "gaussian":
        r = ds.y - eta
        return float(r @ r)
    if ds.family == "binomial":
        return -2.0 * logistic_loglik(eta, ds.y)
    return -2.0 * risk.loglik(eta)


def penalized_path(ds: Dataset, X, kind: str, lambdas, param=None, dfmax=None):
    """Warm-started path; returns (coefs, intercepts, deviances) for the points
    fitted before the support first exceeds ``dfmax`` or the solver fails."""
    code = PENALTY_CODES[kind]
    gam = DEFAULT_PARAM[kind] if param is None else param
    n, p = X.shape
    dfmax = p if dfmax is None else dfmax
    lambdas = np.asarray(lambdas, dtype=float)
    if ds.family == "gaussian":
        betas, b0s, rss, nfit, ok = _cd.gaussian_path(np.ascontiguousarray(X), ds.y, lambdas, code,
                                                       gam, CD_TOL, MAX_SWEEPS, dfmax,
                                                       PATH_MIN_CHANGE if kind == "lasso" else 0.0)
        if not ok:
            raise NoConvergence(f"coordinate descent did not converge in {MAX_SWEEPS} sweeps")
        return betas[:nfit], b0s[:nfit], rss[:nfit]
    risk = CoxRisk(ds.y, ds.event) if ds.family == "cox" else None
    beta = np.zeros(p)
    if ds.family == "binomial":
        ybar = ds.y.mean()
        b0 = math.log(ybar / (1 - ybar))
    else:
        b0 = 0.0
    null_dev = deviance(ds, X, b0, beta, risk)
    coefs, ints, devs = [], [], []
    for lam in lambdas:
        try:
            b0, _ = _solve_glm(ds, X, lam, code, gam, beta, b0, risk=risk)
        except NoConvergence:
            break
        if np.count_nonzero(beta) > dfmax:
            break
        dev = deviance(ds, X, b0, beta, risk)
        coefs.append(beta.copy())
        ints.append(b0)
        devs.append(dev)
        # saturated fit: further points only chase separation
        if dev < 1e-3 * null_dev:
            break
        if kind == "lasso" and len(devs) > 5 and (devs[-2] - dev) / devs[-2] < PATH_MIN_CHANGE:
            break
    return np.array(coefs).reshape(-1, p), np.array(ints), np.array(devs)


def _bic_fit(ds: Dataset, X, kind, n_lambda=100, ratio=1e-3, param=None, dfmax=None,
             ebic_gamma=0.0):
    n = X.shape[0]
    lmax = lambda_max(ds, X)
    lambdas = lambda_path(lmax, n_lambda, ratio) if lmax > 0 else np.array([1.0])
    coefs, ints, devs = penalized_path(ds, X, kind, lambdas, param, dfmax)
    if coefs.shape[0] == 0:
        return np.zeros(X.shape[1]), float(ds.y.mean()), float(lambdas[0]), lambdas, math.inf
    df = np.count_nonzero(coefs, axis=1)
    # extended BIC charges 2*gamma*log(p) more per parameter (p = all columns of ds)
    pen = math.log(n) + 2.0 * ebic_gamma * math.log(max(ds.p, 1))
    if ds.family == "gaussian":
        bic = n * np.log(np.maximum(devs, 1e-300) / n) + df * pen
    else:
        bic = devs + df * pen
    k = int(np.argmin(bic))
    return coefs[k], float(ints[k]), float(lambdas[k]), lambdas[: coefs.shape[0]], float(bic[k])


def bic_select(ds: Dataset, X, kind: str, n_lambda: int = 100, ratio: float = 1e-3,
               param=None, dfmax=None, ebic_gamma: float = 0.0):
    """Fit the lambda path on ``X`` and return the BIC-best point.

    Gaussian BIC is ``n log(RSS/n) + df log n``; GLM BIC is
    ``deviance + df log n``. ``ebic_gamma > 0`` adds ``2 gamma df log p``
    (extended BIC). Returns ``(coef, intercept, lam, lambdas)``.
    """
    return _bic_fit(ds, X, kind, n_lambda, ratio, param, dfmax, ebic_gamma)[:4]


def conditional_scores(ds: Dataset, active, eta) -> np.ndarray:
    """Score-type utility of adding each column to the model on ``active``.

    Uses the IRLS working residual at linear predictor ``eta`` and each
    column's weighted residual after projecting out ``X_active``; for the
    Gaussian family this is |partial correlation| with the residual.
    Columns already in ``active`` score -inf.
    """
    X = ds.X
    n = ds.n
    if ds.family == "gaussian":
        w = np.ones(n)
        r = ds.y - eta
    elif ds.family == "binomial":
        w, z = logistic_working(eta, ds.y)
        r = z - eta
    else:
        w, z = CoxRisk(ds.y, ds.event).working(eta)
        r = z - eta
    sw = np.sqrt(w)
    base = [np.ones(n)] if ds.family != "cox" else []
    B = np.column_stack(base + [X[:, k] for k in active]) if (base or len(active)) else np.zeros((n, 0))
    Xw = X * sw[:, None]
    rw = r * sw
    if B.shape[1]:
        Q, _ = np.linalg.qr(B * sw[:, None])
        Xw = Xw - Q @ (Q.T @ Xw)
        rw = rw - Q @ (Q.T @ rw)
    num = np.abs(Xw.T @ rw)
    den = np.sqrt((Xw ** 2).sum(axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 1e-8 * math.sqrt(n), num / den, 0.0)
    out[np.asarray(active, dtype=int)] = -np.inf
    return out


def select_variables(ds: Dataset, method: str = "sis_then_scad", screen_cap: int | None = None,
                     model_cap: int | None = None, n_lambda: int = 100,
                     iterations: int = 1, ebic_gamma: float = 0.0) -> SelectionResult:
    """Screen, fit a BIC-tuned penalized path, keep the nonzero support.

    For ``sis_then_*`` the screening is iterated (at most ``iterations``
    rounds): the first round keeps the top two thirds of ``screen_cap`` by
    marginal association, later rounds refill up to ``screen_cap`` with the
    columns that best explain the working residual of the current model, and
    the penalized fit is redone on selected ∪ new; a round's model replaces
    the previous one only if its BIC is lower. This recovers features that
    are marginally uncorrelated with the response but jointly important.
    ``iterations=1`` gives plain SIS followed by one penalized fit.
    ``ebic_gamma`` switches the lambda criterion to extended BIC.
    """
    if method not in METHODS:
        raise InvalidSpec(f"unknown selection method {method!r}")
    screen_cap = screen_cap_default(ds.n, ds.family) if screen_cap is None else screen_cap
    model_cap = model_cap_default(ds.n) if model_cap is None else model_cap
    if screen_cap < 1 or model_cap < 1:
        raise InvalidSpec("caps must be >= 1")
    if not ebic_gamma >= 0:
        raise InvalidSpec(f"ebic_gamma must be >= 0, got {ebic_gamma}")
    if method == "sis":
        return sis_screen(ds, min(screen_cap, model_cap))
    screen_cap = min(screen_cap, ds.p)
    if not method.startswith("sis_then_"):
        coef, _, lam, lambdas = bic_select(ds, np.ascontiguousarray(ds.X), method, n_lambda=n_lambda,
                                        ebic_gamma=ebic_gamma)
        return _finish(ds, method, coef, lam, lambdas, model_cap)

    kind = method[len("sis_then_"):]
    first = screen_cap if iterations <= 1 else max(1, (2 * screen_cap) // 3)
    survivors = np.sort(top_k(marginal_scores(ds), first))
    seen = []
    best = None
    for it in range(max(iterations, 1)):
        X = np.ascontiguousarray(ds.X[:, survivors])
        coef_s, b0, lam, lambdas, bic = _bic_fit(ds, X, kind, n_lambda=n_lambda, ebic_gamma=ebic_gamma)
        if best is not None and not bic < best[4]:
            break
        coef = np.zeros(ds.p)
        coef[survivors] = coef_s
        best = (coef, b0, lam, lambdas, bic)
        active = np.flatnonzero(coef)
        key = tuple(active.tolist())
        if key in seen or active.size >= screen_cap:
            break
        seen.append(key)
        room = screen_cap - active.size
        extra = top_k(conditional_scores(ds, active, b0 + ds.X @ coef), room)
        survivors = np.union1d(active, extra)
    coef, _, lam, lambdas, _ = best
    return _finish(ds, method, coef, lam, lambdas, model_cap)


def _finish(ds, method, coef, lam, lambdas, model_cap):
    nz = np.flatnonzero(coef)
    if nz.size > model_cap:
        nz = nz[top_k(np.abs(coef[nz]), model_cap)]
    return SelectionResult(active=np.sort(nz), method=method, lambda_path_used=lambdas,
                           coefficients=coef, lam=lam)
