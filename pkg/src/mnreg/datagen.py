"""Seeded synthetic designs and responses.

Three feature designs (Toeplitz covariance, banded AR(2) precision and
equi-correlation) and three response families (Gaussian, logistic, Cox).
All randomness flows through :func:`make_rng`, which derives independent
Philox streams from ``(master_seed, *keys)`` so replicate ``r`` always sees
the same numbers no matter which worker runs it.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_triangular

from . import numkit
from .exceptions import ConstantColumn, DimensionMismatch, InvalidSpec

FAMILIES = ("gaussian", "binomial", "cox")
COV_KINDS = ("toeplitz", "ar2_precision", "equicorr")


def make_rng(master_seed: int, *keys: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class CovSpec:
    kind: str
    p: int
    rho: float | None = None

    def __post_init__(self):
        if self.kind not in COV_KINDS:
            raise InvalidSpec(f"unknown covariance kind {self.kind!r}")
        if self.p < 1:
            raise InvalidSpec("dimension must be >= 1")
        if self.kind in ("toeplitz", "equicorr"):
            if self.rho is None or not 0 < self.rho < 1:
                raise InvalidSpec(f"{self.kind} needs 0 < rho < 1, got {self.rho}")

    @property
    def is_precision(self) -> bool:
        return self.kind == "ar2_precision"

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "p": self.p}
        if self.rho is not None:
            d["rho"] = self.rho
        return d


@dataclass(frozen=True)
class ModelSpec:
    """True regression model.

    ``beta`` holds the p slopes (0-based positions). ``sigma2`` is used by the
    Gaussian family, ``lambda0``/``lambda_c`` by Cox. ``case_control`` makes
    :func:`simulate` draw a balanced logistic sample by rejection.
    """

    family: str
    beta: np.ndarray
    beta0: float = 0.0
    sigma2: float = 1.0
    lambda0: float = 0.1
    lambda_c: float = 1.0
    case_control: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidSpec(f"unknown family {self.family!r}")
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))
        if self.sigma2 <= 0 or self.lambda0 <= 0 or self.lambda_c <= 0:
            raise InvalidSpec("sigma2, lambda0 and lambda_c must be positive")

    @property
    def p(self) -> int:
        return self.beta.shape[0]

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(self.beta)

    def to_dict(self) -> dict:
        nz = self.active
        return {
            "family": self.family,
            "p": self.p,
            "beta0": self.beta0,
            # 1-based, like the CLI grammar
            "beta": {str(int(j) + 1): float(self.beta[j]) for j in nz},
            "sigma2": self.sigma2,
            "lambda0": self.lambda0,
            "lambda_c": self.lambda_c,
            "case_control": self.case_control,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        beta = np.zeros(int(d["p"]))
        for k, v in d.get("beta", {}).items():
            beta[int(k) - 1] = float(v)
        return cls(
            family=d["family"], beta=beta, beta0=float(d.get("beta0", 0.0)),
            sigma2=float(d.get("sigma2", 1.0)), lambda0=float(d.get("lambda0", 0.1)),
            lambda_c=float(d.get("lambda_c", 1.0)), case_control=bool(d.get("case_control", False)),
        )


@dataclass
class Dataset:
    """Design matrix plus response.

    For Cox data ``y`` holds observed times and ``event`` the 0/1 indicator.
    ``center``/``scale`` record what :func:`standardize` removed, so estimates
    computed on the standardized columns can be reported in original units
    (``beta_original = beta_standardized / scale``).
    """

    X: np.ndarray
    y: np.ndarray
    family: str = "gaussian"
    event: np.ndarray | None = None
    standardized: bool = False
    center: np.ndarray | None = None
    scale: np.ndarray | None = None
    feature_names: list[str] | None = field(default=None, repr=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.X.ndim != 2:
            raise DimensionMismatch("X must be 2-dimensional")
        n, p = self.X.shape
        if self.family not in FAMILIES:
            raise InvalidSpec(f"unknown family {self.family!r}")
        if n < 2:
            raise InvalidSpec("need at least 2 samples")
        if self.y.shape != (n,):
            raise DimensionMismatch(f"y has shape {self.y.shape}, expected ({n},)")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise InvalidSpec("missing or non-finite entries")
        if self.family == "binomial" and not np.all((self.y == 0) | (self.y == 1)):
            raise InvalidSpec("binomial response must be 0/1")
        if self.family == "cox":
            if self.event is None:
                raise InvalidSpec("cox data needs an event indicator")
            self.event = np.asarray(self.event, dtype=float)
            if self.event.shape != (n,) or not np.all((self.event == 0) | (self.event == 1)):
                raise InvalidSpec("event indicator must be a 0/1 vector of length n")
            if np.any(self.y <= 0):
                raise InvalidSpec("survival times must be positive")
        if self.center is None:
            self.center = np.zeros(p)
        if self.scale is None:
            self.scale = np.ones(p)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]


def build_cov(spec: CovSpec) -> np.ndarray:
    """Covariance (toeplitz, equicorr) or precision (ar2_precision) matrix."""
    p = spec.p
    lag = np.abs(np.subtract.outer(np.arange(p), np.arange(p)))
    if spec.kind == "toeplitz":
        return spec.rho ** lag.astype(float)
    if spec.kind == "equicorr":
        m = np.full((p, p), float(spec.rho))
        np.fill_diagonal(m, 1.0)
        return m
    m = np.zeros((p, p))
    m[lag == 0] = 1.0
    m[lag == 1] = 0.5
    m[lag == 2] = 0.25
    return m


def sample_mvn(matrix, is_precision: bool, n: int, seed) -> np.ndarray:
    """Zero-mean Gaussian rows with covariance ``matrix`` (or its inverse).

    ``seed`` is an int or a ``numpy.random.Generator``.
    """
    factor = numkit.cholesky(matrix)
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    xi = rng.standard_normal((n, factor.dimension))
    if is_precision:
        # Theta = L L^T; z = L^{-T} xi has covariance Theta^{-1}
        return solve_triangular(factor.lower, xi.T, lower=True, trans="T").T
    return xi @ factor.lower.T


def gen_response(X, model: ModelSpec, seed) -> Dataset:
    X = np.asarray(X, dtype=float)
    if X.shape[1] != model.p:
        raise DimensionMismatch(f"X has {X.shape[1]} columns, model has {model.p}")
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    n = X.shape[0]
    eta = X @ model.beta
    if model.family == "gaussian":
        y = model.beta0 + eta + rng.normal(0.0, np.sqrt(model.sigma2), n)
        return Dataset(X, y, "gaussian")
    if model.family == "binomial":
        prob = 1.0 / (1.0 + np.exp(-(model.beta0 + eta)))
        y = (rng.random(n) < prob).astype(float)
        return Dataset(X, y, "binomial")
    # shape-1 Weibull with scale lambda0 * exp(-x'beta): hazard exp(x'beta) / lambda0
    t_event = rng.exponential(model.lambda0 * np.exp(-eta))
    t_cens = rng.exponential(model.lambda_c, n)
    time = np.minimum(t_event, t_cens)
    event = (t_event <= t_cens).astype(float)
    return Dataset(X, time, "cox", event=event)


def simulate(cov: CovSpec, model: ModelSpec, n: int, seed: int, *keys: int) -> Dataset:
    """Draw features and response for one replicate (not standardized)."""
    if cov.p != model.p:
        raise DimensionMismatch(f"covariance dimension {cov.p} != model dimension {model.p}")
    matrix = build_cov(cov)
    x_rng = make_rng(seed, *keys, 0)
    y_rng = make_rng(seed, *keys, 1)
    if not (model.family == "binomial" and model.case_control):
        X = sample_mvn(matrix, cov.is_precision, n, x_rng)
        return gen_response(X, model, y_rng)
    n_case = n // 2
    n_ctrl = n - n_case
    cases, ctrls = [], []
    got_case = got_ctrl = 0
    for _ in range(10_000):
        X = sample_mvn(matrix, cov.is_precision, n, x_rng)
        ds = gen_response(X, model, y_rng)
        for row, lab in zip(ds.X, ds.y):
            if lab == 1 and got_case < n_case:
                cases.append(row)
                got_case += 1
            elif lab == 0 and got_ctrl < n_ctrl:
                ctrls.append(row)
                got_ctrl += 1
        if got_case == n_case and got_ctrl == n_ctrl:
            break
    else:
        raise InvalidSpec("could not fill a balanced case-control sample")
    X = np.vstack(cases + ctrls)
    y = np.r_[np.ones(n_case), np.zeros(n_ctrl)]
    return Dataset(X, y, "binomial")


def standardize(ds: Dataset) -> Dataset:
    """Center columns and scale to unit sample variance (divisor n - 1)."""
    X = ds.X
    mean = X.mean(axis=0)
    Xc = X - mean
    sd = np.sqrt((Xc ** 2).sum(axis=0) / (ds.n - 1))
    ref = np.maximum(np.abs(mean), 1.0)
    const = np.flatnonzero(sd <= 1e-12 * ref)
    if const.size:
        raise ConstantColumn(int(const[0]))
    return replace(
        ds, X=Xc / sd, standardized=True,
        center=ds.center + mean * ds.scale, scale=ds.scale * sd,
    )
