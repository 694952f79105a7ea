"""Replicated simulation experiments: coverage, width, FSR/NSR.

Per replicate r the dataset is drawn from ``simulate(cov, model, n,
master_seed, r)``, so a replicate's data depend only on (seed, r). Sums are
accumulated as exact rationals, which makes the aggregate independent of
worker count and of how replicates are batched.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources

import numpy as np

from .baselines import desparsified_lasso
from .datagen import CovSpec, ModelSpec, simulate, standardize
from .exceptions import InvalidSpec, MnrError
from .mnr import (MnrConfig, adjust_pvalues, joint_infer, run_causal, run_mnr,
                  subset_ols_infer)

logger = logging.getLogger(__name__)

PIPELINES = ("mnr", "desparsified", "causal", "ols")


@dataclass
class ExperimentConfig:
    """One simulation study. ``joint_sets`` are 0-based; JSON files use 1-based."""

    name: str
    cov: CovSpec
    model: ModelSpec
    n: int
    pipeline: str = "mnr"
    mnr: MnrConfig = field(default_factory=MnrConfig)
    replicates: int = 50
    level: float = 0.95
    master_seed: int = 20190601
    scale_note: str = ""
    fdr_q: tuple[float, ...] = ()
    joint_sets: tuple[tuple[int, ...], ...] = ()
    bands: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise InvalidSpec(f"unknown pipeline {self.pipeline!r}")
        if self.replicates < 1:
            raise InvalidSpec("replicates must be >= 1")
        if not 0 < self.level < 1:
            raise InvalidSpec("level must lie in (0, 1)")
        if self.cov.p != self.model.p:
            raise InvalidSpec(f"covariance has p={self.cov.p}, model has p={self.model.p}")
        if self.n < 2:
            raise InvalidSpec("n must be >= 2")
        for A in self.joint_sets:
            if min(A) < 0 or max(A) >= self.model.p:
                raise InvalidSpec(f"joint set {[a + 1 for a in A]} out of range")
        if self.mnr.level != self.level:
            self.mnr = MnrConfig(**{**self.mnr.to_dict(), "level": self.level})

    def to_dict(self) -> dict:
        mnr = {k: v for k, v in self.mnr.to_dict().items() if k != "level"}
        return {
            "name": self.name,
            "generator": {"cov": self.cov.to_dict(), "n": self.n},
            "model": self.model.to_dict(),
            "pipeline": {"method": self.pipeline, "mnr": mnr},
            "replicates": self.replicates,
            "level": self.level,
            "seed": self.master_seed,
            "scale_note": self.scale_note,
            "fdr_q": list(self.fdr_q),
            "joint_sets": [[a + 1 for a in A] for A in self.joint_sets],
            "bands": self.bands,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            gen = d["generator"]
            cov = CovSpec(gen["cov"]["kind"], int(gen["cov"]["p"]), gen["cov"].get("rho"))
            model = ModelSpec.from_dict(d["model"])
            pipe = d.get("pipeline", {})
            return cls(
                name=d.get("name", "experiment"), cov=cov, model=model, n=int(gen["n"]),
                pipeline=pipe.get("method", "mnr"),
                mnr=MnrConfig(**pipe.get("mnr", {}), level=float(d.get("level", 0.95))),
                replicates=int(d.get("replicates", 50)), level=float(d.get("level", 0.95)),
                master_seed=int(d.get("seed", 20190601)), scale_note=d.get("scale_note", ""),
                fdr_q=tuple(float(q) for q in d.get("fdr_q", ())),
                joint_sets=tuple(tuple(int(a) - 1 for a in A) for A in d.get("joint_sets", ())),
                bands=dict(d.get("bands", {})),
            )
        except (KeyError, TypeError) as exc:
            raise InvalidSpec(f"malformed experiment config: {exc!r}") from None

    def with_overrides(self, **kw) -> "ExperimentConfig":
        d = {**self.__dict__, **kw}
        return ExperimentConfig(**d)


def load_config(path_or_name: str) -> ExperimentConfig:
    """Load a JSON config from a path, or a bundled preset by name."""
    if path_or_name.endswith(".json"):
        with open(path_or_name, encoding="utf-8") as fh:
            return ExperimentConfig.from_dict(json.load(fh))
    text = resources.files("mnreg.configs").joinpath(f"{path_or_name}.json").read_text()
    return ExperimentConfig.from_dict(json.loads(text))


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("mnreg.configs").iterdir()
                  if p.name.endswith(".json"))


# -- exact streaming moments ---------------------------------------------------------

class Moments:
    """Count, sum and sum of squares held as exact rationals; merge is exact."""

    __slots__ = ("count", "s1", "s2")

    def __init__(self, count=0, s1=Fraction(0), s2=Fraction(0)):
        self.count, self.s1, self.s2 = count, Fraction(s1), Fraction(s2)

    def add(self, x) -> None:
        f = Fraction(float(x))
        self.count += 1
        self.s1 += f
        self.s2 += f * f

    def extend(self, xs) -> None:
        for x in xs:
            self.add(x)

    def merge(self, other: "Moments") -> "Moments":
        return Moments(self.count + other.count, self.s1 + other.s1, self.s2 + other.s2)

    @property
    def mean(self) -> float:
        return float(self.s1 / self.count) if self.count else math.nan

    @property
    def var(self) -> float:
        """Population variance (divisor = count)."""
        if not self.count:
            return math.nan
        m = self.s1 / self.count
        return float(max(self.s2 / self.count - m * m, Fraction(0)))

    def to_list(self) -> list:
        return [self.count, _frac(self.s1), _frac(self.s2)]

    @classmethod
    def from_list(cls, v) -> "Moments":
        return cls(int(v[0]), Fraction(v[1]), Fraction(v[2]))


def _frac(f: Fraction) -> str:
    return f"{f.numerator}/{f.denominator}"


# -- per-replicate work --------------------------------------------------------------

@dataclass
class ReplicateResult:
    index: int
    error: str | None = None
    cover: np.ndarray | None = None  # per coefficient: 1, 0, or nan (not assessed)
    width: np.ndarray | None = None
    estimate: np.ndarray | None = None
    selected: dict = field(default_factory=dict)  # q -> 0-based selected indices
    joint: list = field(default_factory=list)  # per set: 1, 0 or nan
    feature_errors: int = 0


def _coverage(lo, hi, truth):
    """Per-coefficient coverage indicator and width; NaN bounds mean "not
    assessed". Infinite bounds count for coverage but not for width."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    ok = ~(np.isnan(lo) | np.isnan(hi))
    cover = np.full(truth.size, np.nan)
    cover[ok] = ((lo[ok] <= truth[ok]) & (truth[ok] <= hi[ok])).astype(float)
    with np.errstate(invalid="ignore"):
        w = hi - lo
    width = np.where(ok & np.isfinite(w), w, np.nan)
    return cover, width


def run_replicate(cfg: ExperimentConfig, r: int) -> ReplicateResult:
    truth = cfg.model.beta
    try:
        ds = standardize(simulate(cfg.cov, cfg.model, cfg.n, cfg.master_seed, r))
        res = ReplicateResult(r)
        if cfg.pipeline == "desparsified":
            out = desparsified_lasso(ds, cfg.level)
            lo, hi, est, pv = out.ci_low, out.ci_high, out.beta_bc, out.p_value
            res.feature_errors = len(out.degenerate)
            ok = np.isfinite(pv)
            padj = np.full(pv.size, np.nan)
            padj[ok] = adjust_pvalues(pv[ok], "bh")
            feats = np.arange(ds.p)
        elif cfg.pipeline == "ols":
            recs = [subset_ols_infer(ds, j, np.arange(ds.p), cfg.level).rescaled(ds.scale[j])
                    for j in range(ds.p)]
            lo = np.array([x.ci_low for x in recs])
            hi = np.array([x.ci_high for x in recs])
            est = np.array([x.beta_hat for x in recs])
            pv = np.array([x.p_value for x in recs])
            padj = np.full(pv.size, np.nan)
            padj[:] = adjust_pvalues(pv, "bh")
            feats = np.arange(ds.p)
        else:
            rep = run_causal(ds, cfg.mnr) if cfg.pipeline == "causal" else run_mnr(ds, cfg.mnr)
            feats = rep.features
            lo = np.full(ds.p, np.nan)
            hi = np.full(ds.p, np.nan)
            est = np.full(ds.p, np.nan)
            padj = np.full(ds.p, np.nan)
            lo[feats] = rep.column("ci_low")
            hi[feats] = rep.column("ci_high")
            est[feats] = rep.column("beta_hat")
            padj[feats] = rep.p_bh
            res.feature_errors = len(rep.errors)
            if cfg.pipeline == "causal":
                res.selected["causal"] = np.asarray(rep.selected_causal, dtype=int)
            if cfg.joint_sets:
                res.joint = _joint(ds, cfg, rep)
        res.cover, res.width = _coverage(lo, hi, truth)
        res.estimate = est
        for q in cfg.fdr_q:
            res.selected[q] = np.flatnonzero(np.nan_to_num(padj, nan=1.0) < q)
        return res
    except MnrError as exc:
        logger.info("replicate %d failed: %s", r, exc)
        return ReplicateResult(r, error=type(exc).__name__)


def _joint(ds, cfg, rep) -> list:
    out = []
    for A in cfg.joint_sets:
        try:
            j = joint_infer(ds, A, rep.blankets, rep.selection, cfg.level)
            out.append(float(j.covers(cfg.model.beta[list(A)])))
        except MnrError as exc:
            logger.info("joint set %s failed: %s", [a + 1 for a in A], exc)
            out.append(math.nan)
    return out


# -- aggregation -------------------------------------------------------------------

@dataclass
class MetricsTable:
    """Aggregated results of one experiment.

    ``signal_cover`` etc. pool indicators over (coefficient, replicate);
    ``sd`` of a mean is ``sqrt(Var(pool) / R)`` with R the number of
    successful replicates, as in the usual simulation-table convention.
    """

    name: str
    method: str
    p: int
    signal: tuple
    replicates: int
    signal_cover: Moments = field(default_factory=Moments)
    noise_cover: Moments = field(default_factory=Moments)
    signal_width: Moments = field(default_factory=Moments)
    noise_width: Moments = field(default_factory=Moments)
    estimates: list = field(default_factory=list)  # Moments per coefficient
    sel_counts: dict = field(default_factory=dict)  # q -> [false, selected, missed]
    joint: list = field(default_factory=list)  # Moments per joint set
    joint_sets: tuple = ()
    failures: Counter = field(default_factory=Counter)
    feature_failures: int = 0
    replicates_with_feature_failures: int = 0

    @property
    def ok_replicates(self) -> int:
        return self.replicates - sum(self.failures.values())

    def _sd(self, m: Moments) -> float:
        R = self.ok_replicates
        return math.sqrt(m.var / R) if R and m.count else math.nan

    def summary(self) -> dict:
        d = {
            "signal_coverage": self.signal_cover.mean,
            "signal_coverage_sd": self._sd(self.signal_cover),
            "noise_coverage": self.noise_cover.mean,
            "noise_coverage_sd": self._sd(self.noise_cover),
            "signal_width": self.signal_width.mean,
            "signal_width_sd": self._sd(self.signal_width),
            "noise_width": self.noise_width.mean,
            "noise_width_sd": self._sd(self.noise_width),
            "failure_rate": 1.0 - self.ok_replicates / self.replicates,
            "feature_failure_rate": self.replicates_with_feature_failures / self.replicates,
            "any_failure_rate": (self.replicates - self.ok_replicates
                                 + self.replicates_with_feature_failures) / self.replicates,
        }
        for q in sorted(self.sel_counts, key=str):
            fsr, nsr = self.fsr_nsr(q)
            d[f"fsr@{q}"] = fsr
            d[f"nsr@{q}"] = nsr
        for A, m in zip(self.joint_sets, self.joint):
            key = ",".join(str(a + 1) for a in A)
            d[f"joint_coverage[{key}]"] = m.mean
            d[f"joint_coverage_sd[{key}]"] = self._sd(m)
        for j, m in enumerate(self.estimates):
            if j in self.signal or j < 10:
                d[f"estimate_mean[{j + 1}]"] = m.mean
                d[f"estimate_sd[{j + 1}]"] = math.sqrt(m.var) if m.count else math.nan
        return d

    def fsr_nsr(self, q) -> tuple[float, float]:
        false, selected, missed = self.sel_counts[q]
        R = self.ok_replicates
        fsr = false / selected if selected else 0.0
        nsr = missed / (R * len(self.signal)) if R and self.signal else 0.0
        return fsr, nsr

    def merge(self, other: "MetricsTable") -> "MetricsTable":
        if (self.name, self.method, self.p, self.signal) != (other.name, other.method, other.p, other.signal):
            raise InvalidSpec("cannot merge tables from different experiments")
        out = MetricsTable(self.name, self.method, self.p, self.signal,
                           self.replicates + other.replicates,
                           self.signal_cover.merge(other.signal_cover),
                           self.noise_cover.merge(other.noise_cover),
                           self.signal_width.merge(other.signal_width),
                           self.noise_width.merge(other.noise_width),
                           [a.merge(b) for a, b in zip(self.estimates, other.estimates)],
                           {}, [a.merge(b) for a, b in zip(self.joint, other.joint)],
                           self.joint_sets, self.failures + other.failures,
                           self.feature_failures + other.feature_failures,
                           self.replicates_with_feature_failures + other.replicates_with_feature_failures)
        for q in self.sel_counts:
            out.sel_counts[q] = [a + b for a, b in zip(self.sel_counts[q], other.sel_counts[q])]
        return out

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "method": self.method,
            "p": self.p,
            "signal": [j + 1 for j in self.signal],
            "replicates": self.replicates,
            "ok_replicates": self.ok_replicates,
            "summary": {k: _num(v) for k, v in self.summary().items()},
            "failures": dict(sorted(self.failures.items())),
            "feature_failures": self.feature_failures,
            "replicates_with_feature_failures": self.replicates_with_feature_failures,
            "state": {
                "signal_cover": self.signal_cover.to_list(),
                "noise_cover": self.noise_cover.to_list(),
                "signal_width": self.signal_width.to_list(),
                "noise_width": self.noise_width.to_list(),
                "estimates": [m.to_list() for m in self.estimates],
                "sel_counts": {str(q): v for q, v in self.sel_counts.items()},
                "joint": [m.to_list() for m in self.joint],
                "joint_sets": [[a + 1 for a in A] for A in self.joint_sets],
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsTable":
        st = d["state"]
        sel = {}
        for k, v in st["sel_counts"].items():
            sel[k if k == "causal" else float(k)] = list(v)
        return cls(
            d["name"], d["method"], int(d["p"]), tuple(j - 1 for j in d["signal"]),
            int(d["replicates"]),
            Moments.from_list(st["signal_cover"]), Moments.from_list(st["noise_cover"]),
            Moments.from_list(st["signal_width"]), Moments.from_list(st["noise_width"]),
            [Moments.from_list(v) for v in st["estimates"]], sel,
            [Moments.from_list(v) for v in st["joint"]],
            tuple(tuple(a - 1 for a in A) for A in st["joint_sets"]),
            Counter(d["failures"]), int(d["feature_failures"]),
            int(d["replicates_with_feature_failures"]),
        )

    def __eq__(self, other) -> bool:
        return isinstance(other, MetricsTable) and self.to_dict() == other.to_dict()


def _num(v):
    v = float(v)
    return v if math.isfinite(v) else None


def _empty_table(cfg: ExperimentConfig, replicates: int) -> MetricsTable:
    keys = list(cfg.fdr_q) + (["causal"] if cfg.pipeline == "causal" else [])
    return MetricsTable(cfg.name, cfg.pipeline, cfg.model.p, tuple(int(j) for j in cfg.model.active),
                        replicates, estimates=[Moments() for _ in range(cfg.model.p)],
                        sel_counts={q: [0, 0, 0] for q in keys},
                        joint=[Moments() for _ in cfg.joint_sets], joint_sets=cfg.joint_sets)


def aggregate(cfg: ExperimentConfig, results) -> MetricsTable:
    results = sorted(results, key=lambda r: r.index)
    table = _empty_table(cfg, len(results))
    signal = np.zeros(cfg.model.p, dtype=bool)
    signal[list(table.signal)] = True
    truth = set(table.signal)
    for res in results:
        if res.error is not None:
            table.failures[res.error] += 1
            continue
        table.feature_failures += res.feature_errors
        table.replicates_with_feature_failures += int(res.feature_errors > 0)
        for mask, cov_m, wid_m in ((signal, table.signal_cover, table.signal_width),
                                   (~signal, table.noise_cover, table.noise_width)):
            c = res.cover[mask]
            w = res.width[mask]
            cov_m.extend(c[np.isfinite(c)])
            wid_m.extend(w[np.isfinite(w)])
        for j, v in enumerate(res.estimate):
            if np.isfinite(v):
                table.estimates[j].add(v)
        for q, sel in res.selected.items():
            s = set(int(k) for k in sel)
            cnt = table.sel_counts[q]
            cnt[0] += len(s - truth)
            cnt[1] += len(s)
            cnt[2] += len(truth - s)
        for m, v in zip(table.joint, res.joint):
            if np.isfinite(v):
                m.add(v)
    return table


def run_experiment(cfg: ExperimentConfig, threads: int = 1, replicates=None) -> MetricsTable:
    """Run replicates (all, or the given indices) and aggregate.

    With ``threads > 1`` replicates run in a process pool; the table is
    identical for any thread count.
    """
    idx = list(range(cfg.replicates)) if replicates is None else [int(r) for r in replicates]
    if threads > 1 and len(idx) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_replicate, [cfg] * len(idx), idx))
    else:
        results = [run_replicate(cfg, r) for r in idx]
    return aggregate(cfg, results)


def compute_fsr_nsr(selected, truth) -> tuple[float, float]:
    """FSR = sum|S_r minus S*| / sum|S_r| (0 if nothing selected);
    NSR = sum|S* minus S_r| / (R |S*|)."""
    truth = set(int(j) for j in truth)
    false = total = missed = 0
    R = 0
    for s in selected:
        s = set(int(j) for j in s)
        false += len(s - truth)
        total += len(s)
        missed += len(truth - s)
        R += 1
    fsr = false / total if total else 0.0
    nsr = missed / (R * len(truth)) if R and truth else 0.0
    return fsr, nsr


# -- bands ------------------------------------------------------------------------

@dataclass
class BandResult:
    metric: str
    value: float
    low: float
    high: float

    @property
    def ok(self) -> bool:
        return math.isfinite(self.value) and self.low <= self.value <= self.high


def check_bands(table: MetricsTable, bands: dict) -> list[BandResult]:
    """``bands`` maps summary keys (see :meth:`MetricsTable.summary`) to
    [low, high]; ``None`` leaves that side open."""
    s = table.summary()
    out = []
    for key, (lo, hi) in bands.items():
        lo = -math.inf if lo is None else float(lo)
        hi = math.inf if hi is None else float(hi)
        out.append(BandResult(key, float(s.get(key, math.nan)), lo, hi))
    return out


# -- reports ---------------------------------------------------------------------

CSV_COLUMNS = ("experiment", "method", "metric", "value")


def emit_report(tables, fmt: str = "json") -> bytes:
    """Serialize one table or a list of tables as csv, json or markdown."""
    tables = [tables] if isinstance(tables, MetricsTable) else list(tables)
    if fmt == "json":
        obj = [t.to_dict() for t in tables]
        return (json.dumps(obj if len(obj) != 1 else obj[0], indent=2) + "\n").encode()
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for t in tables:
            for k, v in t.summary().items():
                w.writerow([t.name, t.method, k, repr(float(v))])
        return buf.getvalue().encode()
    if fmt == "markdown":
        return _markdown(tables).encode()
    raise InvalidSpec(f"unknown report format {fmt!r}")


def parse_csv_report(data: bytes) -> dict:
    """Inverse of the csv format: {(experiment, method): {metric: value}}."""
    rows = list(csv.reader(io.StringIO(data.decode())))
    if tuple(rows[0]) != CSV_COLUMNS:
        raise InvalidSpec("unexpected csv header")
    out: dict = {}
    for exp, method, metric, value in rows[1:]:
        out.setdefault((exp, method), {})[metric] = float(value)
    return out


def _cell(mean, sd, digits=4):
    if not math.isfinite(mean):
        return "---"
    return f"{mean:.{digits}f}({sd:.{digits}f})"


def _markdown(tables) -> str:
    head = "| Measure | | " + " | ".join(f"{t.method} ({t.name})" for t in tables) + " |"
    lines = [head, "|---|---|" + "---|" * len(tables)]
    for measure, key in (("Coverage", "coverage"), ("Width", "width")):
        for i, part in enumerate(("signal", "noise")):
            cells = []
            for t in tables:
                s = t.summary()
                cells.append(_cell(s[f"{part}_{key}"], s[f"{part}_{key}_sd"]))
            lines.append(f"| {measure if i == 0 else ''} | {part} | " + " | ".join(cells) + " |")
    extra = []
    for t in tables:
        for q in sorted(t.sel_counts, key=str):
            fsr, nsr = t.fsr_nsr(q)
            extra.append(f"| {t.method} ({t.name}) | q={q} | FSR {fsr:.4f} | NSR {nsr:.4f} |")
        for A, m in zip(t.joint_sets, t.joint):
            label = "(" + ",".join(f"β{a + 1}" for a in A) + ")"
            extra.append(f"| {t.method} ({t.name}) | joint {label} | {_cell(m.mean, t._sd(m), 3)} | |")
    if extra:
        lines += ["", "| Experiment | Item | Value | |", "|---|---|---|---|"] + extra
    return "\n".join(lines) + "\n"
