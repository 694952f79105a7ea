import math

import numpy as np
import pytest
from scipy.optimize import minimize

from mnreg.datagen import CovSpec, Dataset, ModelSpec, simulate, standardize
from mnreg.exceptions import InvalidSpec
from mnreg.mnr import MnrConfig, run_mnr
from mnreg.select import (PenaltySpec, bic_select, fit_penalized, lambda_max, model_cap_default,
                          lambda_path, penalized_path, penalty_value, screen_cap_default,
                          select_variables, sis_screen, top_k)

TOEPLITZ_BETA = {0: 2.0, 1: 4.0, 2: -3.0, 3: -5.0, 4: 10.0}


def toeplitz_model(p):
    beta = np.zeros(p)
    for j, v in TOEPLITZ_BETA.items():
        beta[j] = v
    return CovSpec("toeplitz", p, 0.9), ModelSpec("gaussian", beta, beta0=1.0)


def random_problem(rng, n=None, p=None):
    n = n or int(rng.integers(30, 120))
    p = p or int(rng.integers(5, 60))
    X = rng.standard_normal((n, p)) @ np.linalg.cholesky(0.5 * np.eye(p) + 0.5 * np.ones((p, p)) / p).T
    beta = np.zeros(p)
    beta[: min(3, p)] = rng.normal(0, 2, min(3, p))
    y = X @ beta + rng.standard_normal(n)
    return standardize(Dataset(X, y))


def gaussian_objective(ds, b0, beta, kind, lam, param=None):
    r = ds.y - b0 - ds.X @ beta
    return r @ r / (2 * ds.n) + penalty_value(beta, lam, kind, param)


def test_lasso_kkt_random_problems():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        ds = random_problem(rng)
        lam = lambda_max(ds) * rng.uniform(0.02, 0.9)
        fit = fit_penalized(ds, PenaltySpec("lasso", lam))
        grad = ds.X.T @ (ds.y - fit.intercept - ds.X @ fit.coef) / ds.n
        nz = fit.coef != 0
        worst = max(worst,
                    np.max(np.abs(grad[nz] - lam * np.sign(fit.coef[nz])), initial=0.0),
                    np.max(np.abs(grad[~nz]) - lam, initial=0.0))
    assert worst <= 1e-6


def test_lasso_orthonormal_soft_threshold():
    rng = np.random.default_rng(1)
    n, p = 64, 6
    Q, _ = np.linalg.qr(rng.standard_normal((n, p)))
    Q -= Q.mean(axis=0)
    Q, _ = np.linalg.qr(Q)
    X = Q * math.sqrt(n)  # X'X / n = I, centred columns
    y = X @ np.array([1.0, -0.5, 0.2, 0.0, 0.05, -2.0]) + 0.1 * rng.standard_normal(n)
    ds = Dataset(X, y, standardized=True)
    ols = X.T @ (y - y.mean()) / n
    lam = 0.3
    fit = fit_penalized(ds, PenaltySpec("lasso", lam))
    np.testing.assert_allclose(fit.coef, np.sign(ols) * np.maximum(np.abs(ols) - lam, 0), atol=1e-8)


@pytest.mark.parametrize("kind", ["lasso", "scad", "mcp"])
def test_lambda_max_gives_null_model(kind):
    ds = random_problem(np.random.default_rng(3), 80, 20)
    fit = fit_penalized(ds, PenaltySpec(kind, lambda_max(ds) * 1.0001))
    assert np.count_nonzero(fit.coef) == 0


@pytest.mark.parametrize("kind, frac", [("lasso", 0.3), ("scad", 0.2), ("mcp", 0.2)])
def test_two_feature_grid_oracle(kind, frac):
    rng = np.random.default_rng(5)
    n = 200
    X = rng.multivariate_normal([0, 0], [[1, 0.5], [0.5, 1]], n)
    y = 1.0 + X @ np.array([0.8, -0.3]) + rng.standard_normal(n)
    ds = standardize(Dataset(X, y))
    lam = frac * lambda_max(ds)
    fit = fit_penalized(ds, PenaltySpec(kind, lam))
    b0 = ds.y.mean()  # columns are centred, so the intercept is profiled out exactly
    grid = np.linspace(-2, 2, 401)
    G1, G2 = np.meshgrid(grid, grid, indexing="ij")
    vals = np.array([[gaussian_objective(ds, b0, np.array([a, b]), kind, lam) for b in grid] for a in grid])
    i, k = np.unravel_index(np.argmin(vals), vals.shape)
    start = np.array([G1[i, k], G2[i, k]])
    best = minimize(lambda b: gaussian_objective(ds, b0, b, kind, lam), start, method="Nelder-Mead",
                    options=dict(xatol=1e-10, fatol=1e-14, maxiter=5000)).x
    # polish may stop a hair off a kink at zero
    best[np.abs(best) < 1e-5] = 0.0
    np.testing.assert_allclose(fit.coef, best, atol=1e-4)
    assert gaussian_objective(ds, fit.intercept, fit.coef, kind, lam) <= \
        gaussian_objective(ds, b0, best, kind, lam) + 1e-10


def test_binomial_lasso_kkt():
    rng = np.random.default_rng(8)
    n, p = 300, 15
    X = rng.standard_normal((n, p))
    y = (rng.random(n) < 1 / (1 + np.exp(-(X[:, 0] - X[:, 1])))).astype(float)
    ds = standardize(Dataset(X, y, "binomial"))
    lam = 0.3 * lambda_max(ds)
    fit = fit_penalized(ds, PenaltySpec("lasso", lam))
    mu = 1 / (1 + np.exp(-(fit.intercept + ds.X @ fit.coef)))
    grad = ds.X.T @ (ds.y - mu) / n
    nz = fit.coef != 0
    assert nz.any()
    assert np.max(np.abs(grad[nz] - lam * np.sign(fit.coef[nz]))) <= 1e-5
    assert np.max(np.abs(grad[~nz])) <= lam + 1e-5
    assert abs(np.sum(ds.y - mu)) / n <= 1e-5


def test_penalty_spec_validation():
    with pytest.raises(InvalidSpec):
        PenaltySpec("ridge", 0.1)
    with pytest.raises(InvalidSpec):
        PenaltySpec("lasso", 0.0)
    with pytest.raises(InvalidSpec):
        PenaltySpec("scad", 0.1, 2.0)
    assert PenaltySpec("mcp", 0.1).param == 3.0


def test_penalty_values():
    # SCAD is flat beyond a*lam, MCP beyond gamma*lam
    assert penalty_value([10.0], 1.0, "scad") == pytest.approx(4.7 / 2)
    assert penalty_value([10.0], 1.0, "mcp") == pytest.approx(1.5)
    assert penalty_value([-0.5, 0.5], 1.0, "lasso") == 1.0


def test_caps():
    assert screen_cap_default(200) == 37
    assert screen_cap_default(300, "binomial") == 13
    assert model_cap_default(200) == 13


def test_top_k_ties_to_lower_index():
    np.testing.assert_array_equal(top_k([1.0, 3.0, 3.0, 2.0, 3.0], 2), [1, 2])


def test_sis_perfect_correlation():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((50, 10))
    ds = standardize(Dataset(X, X[:, 0].copy()))
    np.testing.assert_array_equal(sis_screen(ds, 1).active, [0])


def test_sis_noise_deterministic():
    rng = np.random.default_rng(1)
    ds = standardize(Dataset(rng.standard_normal((40, 30)), rng.standard_normal(40)))
    a = sis_screen(ds, 5).active
    assert a.size == 5 and np.array_equal(a, sis_screen(ds, 5).active)


def test_select_deterministic():
    cov, model = toeplitz_model(100)
    ds = standardize(simulate(cov, model, 100, 3, 0))
    a = select_variables(ds, "sis_then_scad")
    b = select_variables(ds, "sis_then_scad")
    assert np.array_equal(a.active, b.active) and a.lam == b.lam
    assert a.active.size <= model_cap_default(100)


def test_bic_select_returns_path_point():
    ds = random_problem(np.random.default_rng(9), 100, 30)
    coef, b0, lam, lambdas = bic_select(ds, ds.X, "lasso")
    assert lam in set(lambdas.tolist())
    assert np.count_nonzero(coef) >= 1


def test_ebic_zero_is_bic():
    ds = random_problem(np.random.default_rng(11), 80, 40)
    a = bic_select(ds, ds.X, "lasso")
    b = bic_select(ds, ds.X, "lasso", ebic_gamma=0.0)
    assert np.array_equal(a[0], b[0]) and a[2] == b[2]


def test_ebic_hand_criterion_and_monotone_size():
    rng = np.random.default_rng(12)
    for _ in range(20):
        ds = random_problem(rng, 60, 50)
        lambdas = lambda_path(lambda_max(ds, ds.X))
        coefs, _, rss = penalized_path(ds, ds.X, "lasso", lambdas)
        df = np.count_nonzero(coefs, axis=1)
        sizes = []
        for gamma in (0.0, 0.5, 1.0):
            coef, _, lam, _ = bic_select(ds, ds.X, "lasso", ebic_gamma=gamma)
            crit = ds.n * np.log(rss / ds.n) + df * (math.log(ds.n) + 2 * gamma * math.log(ds.p))
            assert lam == lambdas[int(np.argmin(crit))]
            sizes.append(np.count_nonzero(coef))
        assert sizes[0] >= sizes[1] >= sizes[2]


def test_ebic_gamma_validation():
    ds = random_problem(np.random.default_rng(13), 50, 10)
    with pytest.raises(InvalidSpec):
        select_variables(ds, "sis_then_lasso", ebic_gamma=-0.1)
    with pytest.raises(InvalidSpec):
        select_variables(ds, "sis_then_lasso", ebic_gamma=float("nan"))


@pytest.mark.slow
def test_sis_sure_screening_toeplitz():
    cov, model = toeplitz_model(500)
    cap = screen_cap_default(200)
    hits = 0
    for r in range(100):
        ds = standardize(simulate(cov, model, 200, 777, r))
        hits += set(range(5)) <= set(sis_screen(ds, cap).active.tolist())
    assert hits >= 95


@pytest.mark.slow
def test_select_recovers_toeplitz_signals():
    cov, model = toeplitz_model(500)
    hits = 0
    for r in range(100):
        ds = standardize(simulate(cov, model, 200, 778, r))
        hits += set(range(5)) <= set(select_variables(ds, "sis_then_scad").active.tolist())
    assert hits >= 90


@pytest.mark.slow
def test_null_model_holm_family_wise():
    # all-null response: Holm-adjusted MNR discoveries should be rare; with
    # 60 replicates a true rate of 0.05 exceeds 6 hits with probability < 5%
    cov = CovSpec("toeplitz", 40, 0.5)
    model = ModelSpec("gaussian", np.zeros(40))
    any_hit = 0
    sizes = []
    for r in range(60):
        ds = standardize(simulate(cov, model, 150, 779, r))
        rep = run_mnr(ds, MnrConfig())
        sizes.append(rep.selection.active.size)
        any_hit += bool(np.any(rep.p_holm < 0.05))
    assert any_hit <= 6
    assert np.mean(sizes) <= 2
