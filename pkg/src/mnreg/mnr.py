"""Markov neighborhood regression: per-coefficient inference from small subset fits.

For feature ``j`` the subset ``D_j = {j} ∪ blanket(j) ∪ S_hat`` separates
``X_j`` from every feature left out, so the coefficient of ``X_j`` in the
low-dimensional regression of ``y`` on ``X_{D_j}`` is the full-model
coefficient. Everything else here is the plumbing around that fit.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit, ndtri

from . import numkit
from .blanket import BlanketMap, estimate_blankets
from .datagen import Dataset
from .exceptions import (DomainError, InvalidSpec, MnrError, NoConvergence, NotPositiveDefinite,
                         Separation, SingularDesign, SubsetTooLarge)
from .glm import CoxRisk, logistic_loglik
from .select import (SelectionResult, screening_cap_default, select_variables, sis_screen,
                     top_k)

logger = logging.getLogger(__name__)

NEWTON_MAX = 100
REPORT_COLUMNS = ("feature", "beta_hat", "se", "ci_low", "ci_high", "p_value", "p_holm",
                  "p_bh", "z_score", "df", "subset_size")


@dataclass
class InferenceRecord:
    """Inference for one coefficient. ``feature`` and ``subset`` are 0-based;
    ``df`` is ``math.inf`` for Wald (normal) inference."""

    feature: int
    beta_hat: float
    se: float
    ci_low: float
    ci_high: float
    p_value: float
    df: float
    subset: np.ndarray
    flag: str = ""

    @property
    def t_stat(self) -> float:
        return self.beta_hat / self.se

    @classmethod
    def failed(cls, j, subset, message) -> "InferenceRecord":
        nan = float("nan")
        return cls(j, nan, nan, nan, nan, nan, nan, np.asarray(subset, dtype=int), message)

    def rescaled(self, scale: float) -> "InferenceRecord":
        """Same inference for the column multiplied by ``scale``."""
        return InferenceRecord(self.feature, self.beta_hat / scale, self.se / scale,
                               self.ci_low / scale, self.ci_high / scale, self.p_value,
                               self.df, self.subset, self.flag)


@dataclass
class JointInferenceRecord:
    features: np.ndarray
    beta_hat: np.ndarray
    cov: np.ndarray  # estimated covariance of sqrt(n) (beta_hat_A - beta_A)
    se: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    level: float
    per_coordinate_level: float
    df: float
    subset: np.ndarray

    def covers(self, truth) -> bool:
        truth = np.asarray(truth, dtype=float)
        return bool(np.all((self.ci_low <= truth) & (truth <= self.ci_high)))


def _check_level(level):
    if not 0 < level < 1:
        raise DomainError(f"confidence level must lie in (0, 1), got {level}")


def _subset_array(j, D, p):
    D = np.unique(np.asarray(list(D), dtype=int))
    if j not in set(D.tolist()):
        raise InvalidSpec(f"feature {j} is not in its own subset")
    if D.size and (D[0] < 0 or D[-1] >= p):
        raise InvalidSpec("subset index out of range")
    return D


def _ols(y, Z):
    """OLS with an explicit Cholesky of the Gram matrix."""
    try:
        f = numkit.cholesky(Z.T @ Z)
    except NotPositiveDefinite as exc:
        raise SingularDesign(f"singular subset design: {exc}") from None
    coef = numkit.solve_spd(f, Z.T @ y)
    resid = y - Z @ coef
    return coef, resid, f


def _t_inference(est, se, df, level):
    dist = numkit.STD_NORMAL if math.isinf(df) else numkit.student_t(df)
    q = numkit.dist_quantile(dist, 0.5 + level / 2.0)
    stat = abs(est / se) if se > 0 else math.inf
    p = float(min(1.0, 2.0 * numkit.dist_sf(dist, stat)))
    return est - q * se, est + q * se, p


def subset_ols_infer(ds: Dataset, j: int, D, level: float = 0.95) -> InferenceRecord:
    """OLS of y on intercept + X_D; t inference for the coefficient of X_j."""
    _check_level(level)
    D = _subset_array(j, D, ds.p)
    n, d = ds.n, D.size
    if d > n - 2:
        raise SubsetTooLarge(f"|D_j| = {d} exceeds n - 2 = {n - 2}")
    Z = np.column_stack([np.ones(n), ds.X[:, D]])
    coef, resid, f = _ols(ds.y, Z)
    df = n - d - 1
    sigma2 = float(resid @ resid) / df
    pos = int(np.searchsorted(D, j)) + 1
    e = np.zeros(d + 1)
    e[pos] = 1.0
    # (j, j) entry of the inverse Gram; equals theta_jj / n for centred columns
    inv_jj = float(numkit.solve_spd(f, e)[pos])
    se = math.sqrt(sigma2 * inv_jj)
    est = float(coef[pos])
    lo, hi, p = _t_inference(est, se, df, level)
    return InferenceRecord(j, est, se, lo, hi, p, float(df), D)


# -- GLM and Cox subset fits ---------------------------------------------------

def _newton(objective, start, grad_tol):
    """Damped Newton ascent. ``objective(beta)`` returns (value, grad, hess)."""
    beta = start.copy()
    val, g, H = objective(beta)
    for it in range(NEWTON_MAX):
        if np.max(np.abs(g)) <= grad_tol:
            return beta, val, g, H, it
        try:
            step = numkit.solve_spd(numkit.cholesky(-H), g)
        except MnrError as exc:
            err = SingularDesign(f"observed information not positive definite: {exc}")
            err.last = beta
            raise err from None
        t = 1.0
        for _ in range(50):
            cand = beta + t * step
            cval, cg, cH = objective(cand)
            if np.isfinite(cval) and cval >= val - 1e-12 * abs(val):
                break
            t /= 2.0
        else:
            break
        beta, val, g, H = cand, cval, cg, cH
    if np.max(np.abs(g)) <= grad_tol:
        return beta, val, g, H, NEWTON_MAX
    err = NoConvergence(f"Newton iterations did not converge (|grad| = {np.max(np.abs(g)):.3e})")
    err.last = beta
    raise err


def fit_logistic(X, y, add_intercept=True):
    """Unpenalized logistic MLE. Returns (coef, observed information, loglik)."""
    Z = np.column_stack([np.ones(X.shape[0]), X]) if add_intercept else X

    def obj(b):
        eta = Z @ b
        mu = expit(eta)
        w = mu * (1.0 - mu)
        return logistic_loglik(eta, y), Z.T @ (y - mu), -(Z.T * w) @ Z

    start = np.zeros(Z.shape[1])
    if add_intercept:
        ybar = y.mean()
        start[0] = math.log(ybar / (1.0 - ybar))
    try:
        beta, ll, g, H, _ = _newton(obj, start, 1e-8)
    except (NoConvergence, SingularDesign) as exc:
        if np.max(np.abs(Z @ exc.last)) > 30:
            raise Separation("fitted probabilities pinned at 0 or 1") from None
        raise
    # large but finite |eta| is legitimate for strong signals; a perfect
    # classifier means the MLE only exists at infinity
    if np.all((2.0 * y - 1.0) * (Z @ beta) > 0):
        raise Separation("responses completely separated by the design")
    return beta, -H, ll


def fit_cox(X, time, event, risk: CoxRisk | None = None):
    """Cox MLE via Newton on the Breslow partial likelihood.

    Returns (coef, observed information, loglik, gradient at the MLE).
    """
    risk = CoxRisk(time, event) if risk is None else risk
    if risk.n_events == 0:
        raise SingularDesign("no events")
    beta, ll, g, H, _ = _newton(lambda b: risk.grad_hess(X, b), np.zeros(X.shape[1]), 1e-9)
    return beta, -H, ll, g


def subset_glm_infer(ds: Dataset, j: int, D, level: float = 0.95, risk: CoxRisk | None = None,
                     max_fraction: float = 0.25) -> InferenceRecord:
    """Wald inference for X_j from a logistic or Cox fit on X_D."""
    _check_level(level)
    D = _subset_array(j, D, ds.p)
    if D.size > ds.n * max_fraction:
        raise SubsetTooLarge(f"|D_j| = {D.size} exceeds n/4 = {ds.n * max_fraction:g}")
    XD = ds.X[:, D]
    pos = int(np.searchsorted(D, j))
    if ds.family == "binomial":
        if ds.y.min() == ds.y.max():
            raise SingularDesign("only one class present")
        coef, info, _ = fit_logistic(XD, ds.y)
        pos += 1
    elif ds.family == "cox":
        coef, info, _, _ = fit_cox(XD, ds.y, ds.event, risk)
    else:
        raise InvalidSpec("subset_glm_infer needs binomial or cox data")
    try:
        cov = numkit.invert_spd(info)
    except NotPositiveDefinite as exc:
        raise SingularDesign(str(exc)) from None
    se = math.sqrt(cov[pos, pos])
    est = float(coef[pos])
    lo, hi, p = _t_inference(est, se, math.inf, level)
    return InferenceRecord(j, est, se, lo, hi, p, math.inf, D)


def subset_infer(ds: Dataset, j, D, level=0.95, risk=None) -> InferenceRecord:
    if ds.family == "gaussian":
        return subset_ols_infer(ds, j, D, level)
    return subset_glm_infer(ds, j, D, level, risk=risk)


# -- subset construction ---------------------------------------------------------

def subset_cap(ds: Dataset) -> int:
    return ds.n - 2 if ds.family == "gaussian" else int(ds.n // 4)


def build_subset(ds: Dataset, features, blankets: BlanketMap, selected, cap=None, corr=None):
    """``features ∪ blankets ∪ selected``, trimmed to ``cap`` when needed.

    Trimming keeps ``features`` first, then selected features, then blanket
    members, each group ordered by decreasing |corr| with the first feature.
    """
    features = [int(f) for f in features]
    cap = subset_cap(ds) if cap is None else cap
    sel = [int(k) for k in selected if int(k) not in features]
    nb = [int(k) for k in blankets.union(features) if int(k) not in features and int(k) not in sel]
    if len(features) + len(sel) + len(nb) <= cap:
        return np.array(sorted(features + sel + nb), dtype=int)
    j = features[0]
    if corr is None:
        corr = lambda k: abs(float(np.corrcoef(ds.X[:, j], ds.X[:, k])[0, 1]))
    order = sorted(sel, key=lambda k: (-corr(k), k)) + sorted(nb, key=lambda k: (-corr(k), k))
    keep = features + order[: max(0, cap - len(features))]
    return np.array(sorted(keep), dtype=int)


# -- joint inference -----------------------------------------------------------------

def joint_infer(ds: Dataset, A, blankets: BlanketMap, sel, level: float = 0.95) -> JointInferenceRecord:
    """One subset fit on ``A ∪ blankets(A) ∪ S_hat`` with Bonferroni intervals for A."""
    _check_level(level)
    A = np.unique(np.asarray(list(A), dtype=int))
    if A.size < 2:
        raise InvalidSpec("joint inference needs at least two features")
    selected = sel.active if isinstance(sel, SelectionResult) else np.asarray(sel, dtype=int)
    M = build_subset(ds, A, blankets, selected)
    n = ds.n
    if M.size > subset_cap(ds):
        raise SubsetTooLarge(f"|M| = {M.size} exceeds {subset_cap(ds)}")
    pos = np.searchsorted(M, A)
    if ds.family == "gaussian":
        Z = np.column_stack([np.ones(n), ds.X[:, M]])
        coef, resid, f = _ols(ds.y, Z)
        df = float(n - M.size - 1)
        sigma2 = float(resid @ resid) / df
        gram_inv = numkit.solve_spd(f, np.eye(M.size + 1))
        idx = pos + 1
        cov = n * sigma2 * gram_inv[np.ix_(idx, idx)]
        est = coef[idx]
    else:
        XM = ds.X[:, M]
        if ds.family == "binomial":
            coef, info, _ = fit_logistic(XM, ds.y)
            idx = pos + 1
        else:
            coef, info, _, _ = fit_cox(XM, ds.y, ds.event)
            idx = pos
        df = math.inf
        cov = n * numkit.invert_spd(info)[np.ix_(idx, idx)]
        est = coef[idx]
    cov = 0.5 * (cov + cov.T)
    scale = ds.scale[A]
    est = est / scale
    cov = cov / np.outer(scale, scale)
    se = np.sqrt(np.diag(cov) / n)
    per = 1.0 - (1.0 - level) / A.size
    dist = numkit.STD_NORMAL if math.isinf(df) else numkit.student_t(df)
    q = numkit.dist_quantile(dist, 0.5 + per / 2.0)
    return JointInferenceRecord(A, est, cov, se, est - q * se, est + q * se, level, per, df, M)


# -- multiple testing -----------------------------------------------------------------

def adjust_pvalues(p, method: str = "holm") -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1:
        raise DomainError("p-values must be a vector")
    if np.any(~((p >= 0) & (p <= 1))):
        raise DomainError("p-values must lie in [0, 1]")
    m = p.size
    if m == 0:
        return p.copy()
    if method == "holm":
        order = np.argsort(p, kind="stable")
        adj = np.maximum.accumulate((m - np.arange(m)) * p[order])
    elif method == "bh":
        order = np.argsort(p, kind="stable")[::-1]
        adj = np.minimum.accumulate(m / np.arange(m, 0, -1) * p[order])
    else:
        raise DomainError(f"unknown adjustment {method!r}")
    out = np.empty(m)
    out[order] = np.minimum(adj, 1.0)
    return out


def z_scores(p) -> np.ndarray:
    """Inverse-normal transform ``Phi^{-1}(1 - p)``."""
    return -ndtri(np.asarray(p, dtype=float))


# -- pipelines --------------------------------------------------------------------------

@dataclass
class MnrConfig:
    """Pipeline settings. ``mode`` is ``"full"`` (penalized selection plus
    nodewise blankets by default) or ``"screening"`` (SIS plus correlation
    screening, both capped at floor(sqrt(n)/log n))."""

    selection: str = "sis_then_scad"
    blanket: str = "nodewise"
    mode: str = "full"
    level: float = 0.95
    alpha: float = 0.05
    screen_cap: int | None = None
    model_cap: int | None = None
    blanket_cap: int | None = None
    screen_rounds: int = 1
    ebic_gamma: float = 0.0

    def __post_init__(self):
        if self.mode not in ("full", "screening"):
            raise InvalidSpec(f"unknown mode {self.mode!r}")
        _check_level(self.level)
        if not 0 < self.alpha <= 1:
            raise InvalidSpec("alpha must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MnrReport:
    """Per-feature inference in original feature units (0-based ``features``)."""

    records: list[InferenceRecord]
    p_holm: np.ndarray
    p_bh: np.ndarray
    z_scores: np.ndarray
    selection: SelectionResult
    blankets: BlanketMap
    errors: dict[int, str] = field(default_factory=dict)
    selected_causal: np.ndarray | None = None
    fallback: bool = False
    feature_names: list[str] | None = None

    @property
    def features(self) -> np.ndarray:
        return np.array([r.feature for r in self.records], dtype=int)

    def column(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    @property
    def p_values(self) -> np.ndarray:
        return self.column("p_value")

    def rows(self):
        for i, r in enumerate(self.records):
            name = (self.feature_names[r.feature] if self.feature_names
                    else str(r.feature + 1))
            yield {
                "feature": name,
                "beta_hat": r.beta_hat,
                "se": r.se,
                "ci_low": r.ci_low,
                "ci_high": r.ci_high,
                "p_value": r.p_value,
                "p_holm": float(self.p_holm[i]),
                "p_bh": float(self.p_bh[i]),
                "z_score": float(self.z_scores[i]),
                "df": r.df,
                "subset_size": int(r.subset.size),
            }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for row in self.rows():
            w.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])
        return buf.getvalue()

    def to_dict(self) -> dict:
        d = {
            "columns": list(REPORT_COLUMNS),
            "records": [{k: _json_num(v) for k, v in row.items()} for row in self.rows()],
            "selection": self.selection.to_dict(),
            "blanket_method": self.blankets.method,
            "blanket_cap": self.blankets.cap,
            "errors": {str(k + 1): v for k, v in sorted(self.errors.items())},
        }
        if self.selected_causal is not None:
            d["selected_causal"] = [int(j) + 1 for j in self.selected_causal]
            d["fallback"] = self.fallback
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _fmt(v):
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def _json_num(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return v


def _reduce(ds: Dataset, config: MnrConfig) -> tuple[SelectionResult, int | None]:
    if config.mode == "screening":
        cap = config.screen_cap or screening_cap_default(ds.n)
        return sis_screen(ds, cap), config.blanket_cap or cap
    sel = select_variables(ds, config.selection, config.screen_cap, config.model_cap,
                          iterations=config.screen_rounds, ebic_gamma=config.ebic_gamma)
    return sel, config.blanket_cap


def _assess(ds: Dataset, features, sel, blankets, config) -> MnrReport:
    risk = CoxRisk(ds.y, ds.event) if ds.family == "cox" else None
    C = np.corrcoef(ds.X, rowvar=False) if ds.p > 1 else np.ones((1, 1))
    records, errors = [], {}
    for j in features:
        D = build_subset(ds, [j], blankets, sel.active, corr=lambda k, j=j: abs(C[j, k]))
        try:
            rec = subset_infer(ds, j, D, config.level, risk=risk).rescaled(ds.scale[j])
        except MnrError as exc:
            logger.info("feature %d: %s", j, exc)
            errors[int(j)] = f"{type(exc).__name__}: {exc}"
            rec = InferenceRecord.failed(int(j), D, type(exc).__name__)
        records.append(rec)
    p = np.array([r.p_value for r in records])
    ok = np.isfinite(p)
    p_holm = np.full(p.size, np.nan)
    p_bh = np.full(p.size, np.nan)
    p_holm[ok] = adjust_pvalues(p[ok], "holm")
    p_bh[ok] = adjust_pvalues(p[ok], "bh")
    z = np.full(p.size, np.nan)
    z[ok] = z_scores(p[ok])
    return MnrReport(records, p_holm, p_bh, z, sel, blankets, errors,
                     feature_names=ds.feature_names)


def run_mnr(ds: Dataset, config: MnrConfig | None = None, blankets: BlanketMap | None = None) -> MnrReport:
    """Inference for every coefficient.

    ``ds`` should be standardized (see :func:`mnreg.datagen.standardize`);
    reported estimates are in the units recorded by ``ds.scale``.
    """
    config = MnrConfig() if config is None else config
    sel, bcap = _reduce(ds, config)
    if blankets is None:
        method = "corr_screen" if config.mode == "screening" else config.blanket
        blankets = estimate_blankets(ds.X, method, bcap)
    return _assess(ds, range(ds.p), sel, blankets, config)


def run_causal(ds: Dataset, config: MnrConfig | None = None) -> MnrReport:
    """Assess only the reduced model's features and pick causal ones by Holm.

    If nothing passes, the single smallest-p feature is reported and
    ``fallback`` is set.
    """
    config = MnrConfig() if config is None else config
    sel, bcap = _reduce(ds, config)
    method = "corr_screen" if config.mode == "screening" else config.blanket
    blankets = estimate_blankets(ds.X, method, bcap, nodes=sel.active)
    report = _assess(ds, sel.active, sel, blankets, config)
    hits = report.features[np.nan_to_num(report.p_holm, nan=1.0) < config.alpha]
    if config.alpha >= 1.0:
        hits = report.features[np.isfinite(report.p_holm)]
    fallback = False
    if hits.size == 0 and len(report.records):
        p = np.nan_to_num(report.p_values, nan=np.inf)
        hits = report.features[[int(np.argmin(p))]]
        fallback = True
    report.selected_causal = np.sort(hits)
    report.fallback = fallback
    return report
