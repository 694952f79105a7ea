"""Command-line interface: ``mnreg {simulate,infer,causal,bench}``.

Exit codes: 0 success, 2 usage, 3 data, 4 numerical failure, 5 acceptance
band(s) not met.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import desparsified_lasso
from .bench import check_bands, emit_report, load_config, run_experiment
from .datagen import CovSpec, Dataset, ModelSpec, simulate, standardize
from .exceptions import ConstantColumn, DimensionMismatch, InvalidSpec, MnrError
from .mnr import MnrConfig, adjust_pvalues, run_causal, run_mnr

logger = logging.getLogger("mnreg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_BANDS = 0, 2, 3, 4, 5
DESIGNS = {"toeplitz": "toeplitz", "ar2": "ar2_precision", "equicorr": "equicorr"}


class DataError(Exception):
    pass


class UsageError(Exception):
    pass


# -- helpers --------------------------------------------------------------------------

def parse_beta(spec: str, p: int) -> np.ndarray:
    """``"1:2,2:4,3:-3"`` -> length-p vector (1-based indices)."""
    beta = np.zeros(p)
    if not spec.strip():
        return beta
    for item in spec.split(","):
        try:
            k, v = item.split(":")
            j = int(k)
            val = float(v)
        except ValueError:
            raise UsageError(f"--beta: cannot parse {item!r}; expected index:value") from None
        if not 1 <= j <= p:
            raise UsageError(f"--beta: index {j} outside 1..{p}")
        if beta[j - 1] != 0:
            raise UsageError(f"--beta: index {j} given twice")
        beta[j - 1] = val
    return beta


def resolve_threads(arg) -> int:
    if arg is not None:
        return max(1, int(arg))
    env = os.environ.get("MNR_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"MNR_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def read_csv(path, response, family, event=None) -> Dataset:
    """Numeric CSV with a header row; every non-response column is a feature."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    with fh:
        rows = csv.reader(fh)
        try:
            header = [h.strip() for h in next(rows)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if response not in header:
            raise DataError(f"{path}: response column {response!r} not in header")
        if event is not None and event not in header:
            raise DataError(f"{path}: event column {event!r} not in header")
        data = []
        for lineno, row in enumerate(rows, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            vals = []
            for col, cell in zip(header, row):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}: line {lineno}, column {col!r}: "
                                    f"non-numeric value {cell!r}") from None
            data.append(vals)
    if not data:
        raise DataError(f"{path}: no data rows")
    M = np.array(data)
    iy = header.index(response)
    skip = {iy} | ({header.index(event)} if event is not None else set())
    feats = [i for i in range(len(header)) if i not in skip]
    ev = M[:, header.index(event)] if event is not None else None
    try:
        ds = Dataset(M[:, feats], M[:, iy], family, ev,
                     feature_names=[header[i] for i in feats])
        return standardize(ds)
    except ConstantColumn as exc:
        raise DataError(f"{path}: column {header[feats[exc.index]]!r} is constant") from None
    except (InvalidSpec, DimensionMismatch) as exc:
        raise DataError(f"{path}: {exc}") from None


def write_csv(path, ds: Dataset) -> None:
    names = ds.feature_names or [f"x{j + 1}" for j in range(ds.p)]
    cols = list(names) + ["y"] + (["event"] if ds.event is not None else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for i in range(ds.n):
            row = [repr(float(v)) for v in ds.X[i]] + [repr(float(ds.y[i]))]
            if ds.event is not None:
                row.append(repr(int(ds.event[i])))
            w.writerow(row)


def write_manifest(out: Path, command: str, args: argparse.Namespace, outputs, extra=None) -> Path:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    man = {"tool": "mnreg", "version": __version__, "command": command,
           "resolved": resolved, "outputs": [str(o) for o in outputs]}
    if extra:
        man.update(extra)
    path = out.with_name(out.name + ".manifest.json")
    path.write_text(json.dumps(man, indent=2, default=str) + "\n")
    return path


def _stem(out: str) -> Path:
    p = Path(out)
    return p.with_suffix("") if p.suffix in (".csv", ".json") else p


# -- subcommands --------------------------------------------------------------------

def cmd_simulate(args) -> int:
    if args.design in ("toeplitz", "equicorr") and args.rho is None:
        raise UsageError(f"--rho is required for --design {args.design}")
    cov = CovSpec(DESIGNS[args.design], args.p, args.rho if args.design != "ar2" else None)
    beta = parse_beta(args.beta, args.p)
    model = ModelSpec(args.family, beta, beta0=args.intercept, sigma2=args.sigma2,
                      lambda0=args.lambda0, lambda_c=args.lambda_c, case_control=args.case_control)
    ds = simulate(cov, model, args.n, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out, ds)
    truth = out.with_name(out.stem + ".truth.json")
    truth.write_text(json.dumps({"cov": cov.to_dict(), "model": model.to_dict(), "n": args.n,
                                 "seed": args.seed}, indent=2) + "\n")
    write_manifest(out, "simulate", args, [out, truth])
    print(f"wrote {out} ({ds.n} x {ds.p}) and {truth}")
    return EXIT_OK


def _mnr_config(args) -> MnrConfig:
    blanket = "corr_screen" if args.blanket == "corr" else "nodewise"
    kw = dict(selection=args.selection, blanket=blanket, level=args.level,
              screen_rounds=args.screen_rounds, ebic_gamma=args.ebic_gamma)
    if args.method == "mnr-screen":
        kw["mode"] = "screening"
    if getattr(args, "alpha", None) is not None:
        kw["alpha"] = args.alpha
    return MnrConfig(**kw)


def _print_top(rows, key, k=10):
    rows = sorted(rows, key=lambda r: (np.nan_to_num(r[key], nan=np.inf), r["p_value"]))
    print(f"{'feature':>12} {'estimate':>10} {'ci_low':>10} {'ci_high':>10} {'p_value':>10} {key:>10}")
    for r in rows[:k]:
        print(f"{r['feature']:>12} {r['beta_hat']:>10.4f} {r['ci_low']:>10.4f} {r['ci_high']:>10.4f} "
              f"{r['p_value']:>10.3g} {r[key]:>10.3g}")


def _desparsified_rows(ds, res):
    names = ds.feature_names or [str(j + 1) for j in range(ds.p)]
    p = res.p_value
    ok = np.isfinite(p)
    holm = np.full(p.size, np.nan)
    bh = np.full(p.size, np.nan)
    holm[ok] = adjust_pvalues(p[ok], "holm")
    bh[ok] = adjust_pvalues(p[ok], "bh")
    return [{"feature": names[j], "beta_hat": float(res.beta_bc[j]), "se": float(res.se[j]),
             "ci_low": float(res.ci_low[j]), "ci_high": float(res.ci_high[j]),
             "p_value": float(p[j]), "p_holm": float(holm[j]), "p_bh": float(bh[j])}
            for j in range(ds.p)]


def _write_rows(stem: Path, rows, extra: dict) -> list[Path]:
    cols = list(rows[0]) if rows else []
    csv_path = stem.with_name(stem.name + ".csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r.values()])
    json_path = stem.with_name(stem.name + ".json")
    clean = [{k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in r.items()}
             for r in rows]
    json_path.write_text(json.dumps({"columns": cols, "records": clean, **extra}, indent=2) + "\n")
    return [csv_path, json_path]


def _run_inference(args, causal: bool) -> int:
    if args.family == "cox" and args.event is None:
        raise UsageError("--event is required for --family cox")
    if causal and args.method == "desparsified":
        raise UsageError("--method desparsified is not available for causal")
    ds = read_csv(args.data, args.response, args.family, args.event)
    stem = _stem(args.out)
    stem.parent.mkdir(parents=True, exist_ok=True)
    if args.method == "desparsified":
        if args.family != "gaussian":
            raise UsageError("--method desparsified requires --family gaussian")
        res = desparsified_lasso(ds, args.level)
        rows = _desparsified_rows(ds, res)
        outputs = _write_rows(stem, rows, {"degenerate": [j + 1 for j in res.degenerate]})
        _print_top(rows, "p_holm")
    else:
        cfg = _mnr_config(args)
        rep = run_causal(ds, cfg) if causal else run_mnr(ds, cfg)
        csv_path = stem.with_name(stem.name + ".csv")
        json_path = stem.with_name(stem.name + ".json")
        csv_path.write_text(rep.to_csv())
        json_path.write_text(rep.to_json() + "\n")
        outputs = [csv_path, json_path]
        for j, msg in sorted(rep.errors.items()):
            name = ds.feature_names[j] if ds.feature_names else str(j + 1)
            logger.warning("feature %s: %s", name, msg)
        if len(rep.errors) == len(rep.records) and rep.records:
            print(f"error: inference failed for every feature; first: "
                  f"{next(iter(rep.errors.values()))}", file=sys.stderr)
            write_manifest(stem, "causal" if causal else "infer", args, outputs)
            return EXIT_NUMERIC
        _print_top(list(rep.rows()), "p_holm")
        if causal:
            names = ds.feature_names or [str(j + 1) for j in range(ds.p)]
            sel = [names[j] for j in rep.selected_causal]
            flag = " (fallback: smallest p-value)" if rep.fallback else ""
            print(f"selected_causal: {', '.join(sel)}{flag}")
    write_manifest(stem, "causal" if causal else "infer", args, outputs)
    return EXIT_OK


def cmd_infer(args) -> int:
    return _run_inference(args, causal=False)


def cmd_causal(args) -> int:
    return _run_inference(args, causal=True)


def cmd_bench(args) -> int:
    threads = resolve_threads(args.threads)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    failed = False
    for ref in args.config:
        if args.desk and not ref.endswith(".json") and ref.endswith("_paper"):
            ref = ref[: -len("_paper")] + "_desk"
        try:
            cfg = load_config(ref)
        except FileNotFoundError:
            raise DataError(f"config {ref!r} not found") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"config {ref!r}: invalid JSON at line {exc.lineno}, column {exc.colno}") from None
        over = {}
        if args.seed is not None:
            over["master_seed"] = args.seed
        if args.replicates is not None:
            over["replicates"] = args.replicates
        if over:
            cfg = cfg.with_overrides(**over)
        table = run_experiment(cfg, threads=threads)
        stem = outdir / cfg.name
        outputs = []
        for fmt, ext in (("json", "json"), ("csv", "csv"), ("markdown", "md")):
            path = stem.with_name(f"{cfg.name}.{ext}")
            path.write_bytes(emit_report(table, fmt))
            outputs.append(path)
        bands = check_bands(table, cfg.bands)
        write_manifest(stem, "bench", args, outputs,
                       {"config": cfg.to_dict(), "threads_used": threads,
                        "bands": [{"metric": b.metric, "value": b.value, "low": b.low,
                                   "high": b.high, "ok": b.ok} for b in bands]})
        print(emit_report(table, "markdown").decode(), end="")
        for b in bands:
            status = "ok  " if b.ok else "FAIL"
            print(f"[{status}] {cfg.name}: {b.metric} = {b.value:.4f}  band [{b.low}, {b.high}]")
            failed |= not b.ok
    return EXIT_BANDS if failed else EXIT_OK


# -- parser -------------------------------------------------------------------------

def _positive_int(s):
    try:
        v = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {s!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _nonneg_float(s):
    try:
        v = float(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {s!r}") from None
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _level(s):
    try:
        v = float(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {s!r}") from None
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mnreg", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="draw a dataset from a known model")
    s.add_argument("--design", choices=sorted(DESIGNS), required=True)
    s.add_argument("--rho", type=float)
    s.add_argument("--n", type=_positive_int, required=True)
    s.add_argument("--p", type=_positive_int, required=True)
    s.add_argument("--family", choices=("gaussian", "binomial", "cox"), default="gaussian")
    s.add_argument("--beta", required=True, help='1-based "index:value,..." e.g. "1:2,2:4"')
    s.add_argument("--intercept", type=float, default=0.0)
    s.add_argument("--sigma2", type=float, default=1.0)
    s.add_argument("--lambda0", type=float, default=0.1)
    s.add_argument("--lambda-c", dest="lambda_c", type=float, default=1.0)
    s.add_argument("--case-control", action="store_true",
                   help="binomial: balanced cases and controls")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    for name, helptext in (("infer", "confidence intervals and p-values for every feature"),
                           ("causal", "causal feature discovery on the reduced model")):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--data", required=True)
        c.add_argument("--response", required=True)
        c.add_argument("--event")
        c.add_argument("--family", choices=("gaussian", "binomial", "cox"), default="gaussian")
        c.add_argument("--method", choices=("mnr", "mnr-screen", "desparsified"), default="mnr")
        c.add_argument("--selection", default="sis_then_scad",
                       choices=("sis_then_lasso", "sis_then_scad", "sis_then_mcp",
                                "lasso", "scad", "mcp"))
        c.add_argument("--screen-rounds", type=_positive_int, default=1,
                       help="screening rounds; 2 adds features that matter only jointly")
        c.add_argument("--ebic-gamma", type=_nonneg_float, default=0.0,
                       help="extended-BIC gamma for the selection path (0 = plain BIC)")
        c.add_argument("--level", type=_level, default=0.95)
        c.add_argument("--blanket", choices=("nodewise", "corr"), default="nodewise")
        c.add_argument("--seed", type=int, default=0,
                       help="recorded in the manifest; the pipeline is deterministic")
        c.add_argument("--out", required=True)
        c.add_argument("--threads", type=_positive_int)
        if name == "causal":
            c.add_argument("--alpha", type=float, default=0.05)
        c.set_defaults(func=cmd_causal if name == "causal" else cmd_infer)

    b = sub.add_parser("bench", help="run simulation presets or config files")
    b.add_argument("--config", nargs="+", required=True,
                   help="JSON config path(s) or preset name(s)")
    b.add_argument("--out", required=True)
    b.add_argument("--seed", type=int)
    b.add_argument("--threads", type=_positive_int)
    b.add_argument("--replicates", type=_positive_int)
    b.add_argument("--desk", action="store_true", help="use the desk-scale variant of *_paper presets")
    b.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mnreg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InvalidSpec as exc:
        print(f"error: invalid specification: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MnrError as exc:
        print(f"error: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
