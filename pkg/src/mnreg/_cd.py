"""Compiled coordinate-descent kernels for weighted penalized least squares.

Minimizes ``(1/2n) sum_i w_i (z_i - b0 - x_i'beta)^2 + sum_j pen(beta_j)`` with
an unpenalized intercept. Penalty codes: 0 lasso, 1 SCAD(a), 2 MCP(gamma).
GLM fits call these inside an IRLS loop with working weights and responses.
"""
import numpy as np
from numba import njit

LASSO, SCAD, MCP = 0, 1, 2


@njit(cache=True)
def soft(z, t):
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


@njit(cache=True)
def _uni(b, v, g, lam, kind, gam):
    return 0.5 * v * b * b - g * b + penalty(b, lam, kind, gam)


@njit(cache=True)
def _best_on(lo, hi, curv, lin, v, g, lam, kind, gam, best, fbest):
    """Minimize the univariate objective over [lo, hi] where it is a quadratic
    with curvature ``curv`` and stationary point ``lin / curv``."""
    cands = np.empty(3)
    cands[0] = lo
    cands[1] = hi
    cands[2] = lo
    if curv > 0.0:
        b = lin / curv
        cands[2] = min(max(b, lo), hi)
    for c in cands:
        f = _uni(c, v, g, lam, kind, gam)
        if f < fbest:
            fbest = f
            best = c
    return best, fbest


@njit(cache=True)
def threshold(g, v, lam, kind, gam):
    """Exact minimizer of (v/2) b^2 - g b + pen(b)."""
    if kind == LASSO:
        return soft(g, lam) / v
    ag = abs(g)
    if kind == SCAD:
        if v > 1.0 / (gam - 1.0):
            if ag <= lam * (v + 1.0):
                return soft(g, lam) / v
            if ag <= v * gam * lam:
                return soft(g, gam * lam / (gam - 1.0)) / (v - 1.0 / (gam - 1.0))
            return g / v
    elif v > 1.0 / gam:
        if ag <= v * gam * lam:
            return soft(g, lam) / (v - 1.0 / gam)
        return g / v
    # nonconvex univariate problem: search each quadratic piece on the side of g
    s = 1.0 if g >= 0.0 else -1.0
    best, fbest = 0.0, 0.0
    big = ag / v + gam * lam + 1.0
    if kind == SCAD:
        best, fbest = _best_on(0.0, lam, v, ag - lam, v, ag, lam, kind, gam, best, fbest)
        best, fbest = _best_on(lam, gam * lam, v - 1.0 / (gam - 1.0), ag - gam * lam / (gam - 1.0),
                               v, ag, lam, kind, gam, best, fbest)
        best, fbest = _best_on(gam * lam, big, v, ag, v, ag, lam, kind, gam, best, fbest)
    else:
        best, fbest = _best_on(0.0, gam * lam, v - 1.0 / gam, ag - lam, v, ag, lam, kind, gam, best, fbest)
        best, fbest = _best_on(gam * lam, big, v, ag, v, ag, lam, kind, gam, best, fbest)
    return s * best


@njit(cache=True)
def penalty(b, lam, kind, gam):
    a = abs(b)
    if kind == LASSO:
        return lam * a
    if kind == SCAD:
        if a <= lam:
            return lam * a
        if a <= gam * lam:
            return (2.0 * gam * lam * a - a * a - lam * lam) / (2.0 * (gam - 1.0))
        return lam * lam * (gam + 1.0) / 2.0
    if a <= gam * lam:
        return lam * a - a * a / (2.0 * gam)
    return gam * lam * lam / 2.0


@njit(cache=True)
def objective(r, w, beta, lam, kind, gam):
    n = r.shape[0]
    s = 0.0
    for i in range(n):
        s += w[i] * r[i] * r[i]
    s /= 2.0 * n
    for j in range(beta.shape[0]):
        s += penalty(beta[j], lam, kind, gam)
    return s


@njit(cache=True)
def _sweep(X, w, xwx, r, beta, lam, kind, gam, active_only):
    n, p = X.shape
    maxd = 0.0
    for j in range(p):
        if active_only and beta[j] == 0.0:
            continue
        v = xwx[j]
        if v <= 0.0:
            continue
        g = 0.0
        for i in range(n):
            g += w[i] * X[i, j] * r[i]
        g = g / n + v * beta[j]
        new = threshold(g, v, lam, kind, gam)
        d = new - beta[j]
        if d != 0.0:
            for i in range(n):
                r[i] -= d * X[i, j]
            beta[j] = new
            ad = abs(d) * np.sqrt(v)
            if ad > maxd:
                maxd = ad
    return maxd


@njit(cache=True)
def _center(w, r, sw):
    s = 0.0
    for i in range(r.shape[0]):
        s += w[i] * r[i]
    d = s / sw
    for i in range(r.shape[0]):
        r[i] -= d
    return d


@njit(cache=True)
def cd_solve(X, z, w, xwx, beta, b0, lam, kind, gam, fit_intercept, tol, max_sweeps, hist):
    """Run CD from the warm start ``(b0, beta)``; ``beta`` is updated in place.

    Alternates one full sweep with sweeps over the current support until a full
    sweep moves no coordinate by more than ``tol`` (in sqrt(v)-scaled units).
    When ``hist`` is non-empty the objective after each sweep is written to it.
    Returns ``(b0, sweeps, converged)``.
    """
    n = X.shape[0]
    r = z - b0 - X @ beta
    sw = w.sum()
    nh = hist.shape[0]
    sweeps = 0
    while sweeps < max_sweeps:
        maxd = _sweep(X, w, xwx, r, beta, lam, kind, gam, False)
        if fit_intercept:
            d = _center(w, r, sw)
            b0 += d
            if abs(d) > maxd:
                maxd = abs(d)
        if sweeps < nh:
            hist[sweeps] = objective(r, w, beta, lam, kind, gam)
        sweeps += 1
        if maxd < tol:
            return b0, sweeps, True
        while sweeps < max_sweeps:
            maxd = _sweep(X, w, xwx, r, beta, lam, kind, gam, True)
            if fit_intercept:
                d = _center(w, r, sw)
                b0 += d
                if abs(d) > maxd:
                    maxd = abs(d)
            if sweeps < nh:
                hist[sweeps] = objective(r, w, beta, lam, kind, gam)
            sweeps += 1
            if maxd < tol:
                break
    return b0, sweeps, False


@njit(cache=True)
def gram_solve(G, c, beta, lam, kind, gam, tol, max_sweeps, q):
    """CD on ``(1/2) b'Gb - c'b + pen(b)`` with covariance updates.

    ``q`` must equal ``G @ beta`` on entry and is kept in sync. Each
    coordinate costs O(1) unless it moves, then O(p).
    """
    p = G.shape[0]
    sweeps = 0
    active_only = False
    while sweeps < max_sweeps:
        maxd = 0.0
        for j in range(p):
            if active_only and beta[j] == 0.0:
                continue
            v = G[j, j]
            if v <= 0.0:
                continue
            g = c[j] - q[j] + v * beta[j]
            new = threshold(g, v, lam, kind, gam)
            d = new - beta[j]
            if d != 0.0:
                for k in range(p):
                    q[k] += d * G[k, j]
                beta[j] = new
                ad = abs(d) * np.sqrt(v)
                if ad > maxd:
                    maxd = ad
        sweeps += 1
        if maxd < tol:
            if not active_only:
                return sweeps, True
            active_only = False
        else:
            active_only = True
    return sweeps, False


@njit(cache=True)
def gaussian_path(X, y, lambdas, kind, gam, tol, max_sweeps, dfmax, min_rss_change):
    """Warm-started path for unit weights via centred Gram updates.

    Stops once the support exceeds ``dfmax`` or (after five points) the
    fractional drop in RSS between consecutive points falls below
    ``min_rss_change``; pass 0 to disable for SCAD/MCP, whose paths have flat
    stretches. ``nfit`` is the
    number of path points filled. ``ok`` is False if any point hit
    ``max_sweeps``.
    """
    n, p = X.shape
    L = lambdas.shape[0]
    betas = np.zeros((L, p))
    b0s = np.zeros(L)
    rss = np.zeros(L)
    xm = np.zeros(p)
    for j in range(p):
        xm[j] = X[:, j].mean()
    ym = y.mean()
    Xc = X - xm
    yc = y - ym
    G = (Xc.T @ Xc) / n
    c = (Xc.T @ yc) / n
    yty = (yc @ yc) / n
    beta = np.zeros(p)
    q = np.zeros(p)
    nfit = 0
    ok = True
    prev = yty
    for k in range(L):
        sweeps, conv = gram_solve(G, c, beta, lambdas[k], kind, gam, tol, max_sweeps, q)
        if not conv:
            ok = False
        df = 0
        for j in range(p):
            if beta[j] != 0.0:
                df += 1
        if df > dfmax:
            break
        betas[k] = beta
        b0s[k] = ym - xm @ beta
        cur = max(yty - 2.0 * (c @ beta) + beta @ q, 0.0)
        rss[k] = cur * n
        nfit = k + 1
        if min_rss_change > 0.0 and k >= 5 and prev > 0.0 and (prev - cur) / prev < min_rss_change:
            break
        prev = cur
    return betas, b0s, rss, nfit, ok
