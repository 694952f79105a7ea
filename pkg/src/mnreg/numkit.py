"""Dense SPD linear algebra and the three reference distributions.

Factorizations go through LAPACK (via scipy) with an explicit pivot check so
near-singular Gram matrices fail loudly instead of being regularized.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg, special

from .exceptions import DimensionMismatch, DomainError, NotPositiveDefinite

PIVOT_RTOL = 1e-12
SYMMETRY_TOL = 1e-12


@dataclass(frozen=True)
class SpdFactor:
    """Lower-triangular Cholesky factor ``L`` with ``L @ L.T == a``."""

    lower: np.ndarray

    @property
    def dimension(self) -> int:
        return self.lower.shape[0]

    def reconstruct(self) -> np.ndarray:
        return self.lower @ self.lower.T


def _as_square(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise DimensionMismatch(f"expected a non-empty square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DomainError("matrix has non-finite entries")
    return a


def cholesky(a) -> SpdFactor:
    a = _as_square(a)
    scale = max(np.max(np.abs(a)), 1.0)
    if np.max(np.abs(a - a.T)) > SYMMETRY_TOL * scale:
        raise DomainError("matrix is not symmetric")
    dmax = np.max(np.diag(a))
    if dmax <= 0:
        raise NotPositiveDefinite("non-positive diagonal")
    try:
        L = linalg.cholesky(a, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    # pivots of the factorization are the squared diagonal of L
    pivots = np.diag(L) ** 2
    if np.any(pivots <= PIVOT_RTOL * dmax):
        k = int(np.argmin(pivots))
        raise NotPositiveDefinite(f"pivot {k} is {pivots[k]:.3e}, below {PIVOT_RTOL:g} x max diagonal")
    return SpdFactor(L)


def solve_spd(factor: SpdFactor, b) -> np.ndarray:
    b = np.asarray(b, dtype=float)
    if b.shape[0] != factor.dimension:
        raise DimensionMismatch(f"rhs has {b.shape[0]} rows, factor has dimension {factor.dimension}")
    return linalg.cho_solve((factor.lower, True), b, check_finite=False)


def invert_spd(a) -> np.ndarray:
    f = cholesky(a)
    inv = solve_spd(f, np.eye(f.dimension))
    return 0.5 * (inv + inv.T)


# -- distributions ---------------------------------------------------------

@dataclass(frozen=True)
class Dist:
    name: str
    df: float | None = None

    def __post_init__(self):
        if self.name not in ("std_normal", "student_t", "chi_square"):
            raise DomainError(f"unknown distribution {self.name!r}")
        if self.name != "std_normal" and (self.df is None or not self.df >= 1):
            raise DomainError(f"{self.name} needs df >= 1, got {self.df}")


STD_NORMAL = Dist("std_normal")


def student_t(df) -> Dist:
    return Dist("student_t", float(df))


def chi_square(df) -> Dist:
    return Dist("chi_square", float(df))


def dist_cdf(dist: Dist, x):
    if dist.name == "std_normal":
        return special.ndtr(x)
    if dist.name == "student_t":
        return special.stdtr(dist.df, x)
    return special.chdtr(dist.df, np.maximum(x, 0.0))


def dist_sf(dist: Dist, x):
    """Upper tail ``1 - cdf(x)``, accurate far into the tail."""
    x = np.asarray(x, dtype=float)
    if dist.name == "std_normal":
        return special.ndtr(-x)
    if dist.name == "student_t":
        return special.stdtr(dist.df, -x)
    return np.where(x > 0, special.chdtrc(dist.df, np.maximum(x, 0.0)), 1.0)


def _check_prob(prob):
    p = np.asarray(prob, dtype=float)
    if np.any(~((p > 0) & (p < 1))):
        raise DomainError(f"probability must lie in (0, 1), got {prob}")
    return p


def _scalar(out):
    return float(out) if np.ndim(out) == 0 else out


def _t_pdf(df, x):
    logc = special.gammaln((df + 1) / 2) - special.gammaln(df / 2) - 0.5 * np.log(df * np.pi)
    return np.exp(logc - (df + 1) / 2 * np.log1p(x * x / df))


def _t_quantile(df, p):
    # stdtrit is only good to ~1e-11; one Newton step on stdtr restores full precision
    x = special.stdtrit(df, p)
    return x - (special.stdtr(df, x) - p) / _t_pdf(df, x)


def dist_quantile(dist: Dist, prob):
    p = _check_prob(prob)
    if dist.name == "std_normal":
        return _scalar(special.ndtri(p))
    if dist.name == "student_t":
        return _scalar(_t_quantile(dist.df, p))
    return _scalar(special.chdtri(dist.df, 1.0 - p))


def dist_isf(dist: Dist, prob):
    """Upper-tail quantile; inverse of :func:`dist_sf`."""
    p = _check_prob(prob)
    if dist.name == "std_normal":
        return _scalar(-special.ndtri(p))
    if dist.name == "student_t":
        return _scalar(-_t_quantile(dist.df, p))
    return _scalar(special.chdtri(dist.df, p))
