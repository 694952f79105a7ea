"""Desparsified (bias-corrected) Lasso, the comparator for MNR."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numkit
from .datagen import Dataset
from .exceptions import InvalidSpec
from .select import bic_select, screen_cap_default

DEGENERATE_RTOL = 1e-10


@dataclass
class DebiasedResult:
    beta_bc: np.ndarray
    beta_lasso: np.ndarray
    theta_hat_rows: np.ndarray  # row j: nodewise coefficients gamma_j (0 at j)
    se: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    p_value: np.ndarray
    sigma_hat2: float
    level: float
    degenerate: list[int] = field(default_factory=list)

    @property
    def p(self) -> int:
        return self.beta_bc.shape[0]


def _projection_residual(X, j, dfmax):
    """Residual Z_j of the Lasso regression of X_j on the other columns."""
    n, p = X.shape
    others = np.delete(np.arange(p), j)
    node = Dataset(X[:, others], X[:, j], "gaussian")
    coef, b0, _, _ = bic_select(node, np.ascontiguousarray(node.X), "lasso", dfmax=dfmax)
    gamma = np.zeros(p)
    gamma[others] = coef
    return X[:, j] - b0 - X[:, others] @ coef, gamma


def desparsified_lasso(ds: Dataset, level: float = 0.95, dfmax: int | None = None) -> DebiasedResult:
    """``beta_bc,j = beta_lasso,j + Z_j'(y - X beta_lasso) / Z_j'X_j``.

    Lasso fits (response and every nodewise regression) pick lambda by BIC
    over paths capped at ``dfmax`` nonzeros (default floor(n / log n)).
    Features with ``|Z_j'X_j| <= 1e-10 n`` are listed in ``degenerate`` and
    get NaN inference.
    """
    if ds.family != "gaussian":
        raise InvalidSpec("desparsified Lasso is implemented for Gaussian responses only")
    if not 0 < level < 1:
        raise InvalidSpec("level must lie in (0, 1)")
    X, y = ds.X, ds.y
    n, p = X.shape
    dfmax = screen_cap_default(n) if dfmax is None else dfmax
    coef, b0, _, _ = bic_select(ds, np.ascontiguousarray(X), "lasso", dfmax=dfmax)
    resid = y - b0 - X @ coef
    support = np.count_nonzero(coef)
    sigma2 = float(resid @ resid) / max(n - support, 1)
    q = numkit.dist_quantile(numkit.STD_NORMAL, 0.5 + level / 2.0)

    beta_bc = np.full(p, np.nan)
    se = np.full(p, np.nan)
    rows = np.zeros((p, p))
    degenerate = []
    for j in range(p):
        Z, gamma = _projection_residual(X, j, dfmax)
        rows[j] = gamma
        zx = float(Z @ X[:, j])
        if abs(zx) <= DEGENERATE_RTOL * n:
            degenerate.append(j)
            continue
        beta_bc[j] = coef[j] + float(Z @ resid) / zx
        se[j] = math.sqrt(sigma2) * float(np.linalg.norm(Z)) / abs(zx)
    scale = ds.scale
    beta_bc, se = beta_bc / scale, se / scale
    with np.errstate(invalid="ignore"):
        pval = np.minimum(1.0, 2.0 * numkit.dist_sf(numkit.STD_NORMAL, np.abs(beta_bc / se)))
    return DebiasedResult(beta_bc, coef / scale, rows, se, beta_bc - q * se, beta_bc + q * se,
                          pval, sigma2, level, degenerate)
