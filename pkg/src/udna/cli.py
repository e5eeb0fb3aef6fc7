"""Command-line front end: ``udna run | compare | diag``.

Exit codes: 0 success, 1 configuration or file error, 2 divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load_config
from .diagnostics import InsufficientSamples, descent_report, kl_witness, rate_fit
from .engine import descent_coefficients, resolve_stepsize, run
from .network import spectral_constants
from .problems import LibsvmParseError
from .traceio import TraceSchemaError, read_trace, write_json, write_trace

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2


def _out_dir(args) -> Path:
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _setup(args):
    cfg = load_config(args.config)
    try:
        problem = cfg.build_problem()
    except OSError as e:
        raise ConfigError("problem.path", f"cannot read dataset: {e.strerror}") from None
    except LibsvmParseError as e:
        raise ConfigError("problem.path", str(e), e.line) from None
    return cfg, problem, cfg.build_mixing()


def cmd_run(args) -> int:
    cfg, problem, mixing = _setup(args)
    algo = cfg.build_algo()
    res = run(algo, problem, mixing)
    out = _out_dir(args)
    outcfg = cfg.section("output")
    write_trace(out / outcfg["trace"], res.trace)
    summary = res.summary()
    summary["config"] = cfg.canonical()
    summary["version"] = __version__
    write_json(out / outcfg["summary"], summary)
    print(
        f"{algo.name}: {res.status} after {res.state.t} iterations, "
        f"optimality error {res.trace[-1].opt_err:.3e}, volume {res.state.volume}"
    )
    return EXIT_DIVERGED if res.status == "diverged" else EXIT_OK


def _first_reach(res, threshold):
    for r in res.trace:
        if r.opt_err <= threshold:
            return r.t, r.volume
    return None, None


def cmd_compare(args) -> int:
    cfg, problem, mixing = _setup(args)
    names = args.presets.split(",") if args.presets else [cfg.section("algorithm")["preset"]]
    names = [s.strip() for s in names if s.strip()]
    if len(names) < 2:
        raise ConfigError("--presets", "compare needs at least two presets")
    out = _out_dir(args)
    rows, table, diverged = [], [], False
    for name in names:
        try:
            algo = cfg.build_algo(name)
        except ValueError as e:
            raise ConfigError("--presets", str(e)) from None
        res = run(algo, problem, mixing)
        diverged |= res.status == "diverged"
        rows.extend((name, r.t, r.volume, r.opt_err) for r in res.trace)
        it, vol = _first_reach(res, args.threshold)
        table.append({"preset": name, "status": res.status, "iterations": it, "volume": vol})
    # Competition ranking by volume to threshold; ties share a rank, misses rank last.
    for t in table:
        if t["volume"] is None:
            t["rank"] = len(table)
        else:
            t["rank"] = 1 + sum(1 for u in table if u["volume"] is not None and u["volume"] < t["volume"])
    with open(out / "compare_curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["preset", "iteration", "volume", "opt_err"])
        w.writerows((p, t, v, repr(e)) for p, t, v, e in rows)
    with open(out / "compare_ranking.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["rank", "preset", "iterations", "volume", "status"])
        w.writeheader()
        for t in sorted(table, key=lambda r: (r["rank"], r["preset"])):
            w.writerow(t)
    for t in sorted(table, key=lambda r: r["rank"]):
        print(f"{t['rank']:>3}  {t['preset']:<14} iterations={t['iterations']} volume={t['volume']}")
    return EXIT_DIVERGED if diverged else EXIT_OK


def cmd_diag(args) -> int:
    cfg, problem, mixing = _setup(args)
    try:
        trace = read_trace(args.trace)
    except OSError as e:
        raise ConfigError("--trace", f"cannot read trace: {e.strerror}") from None
    except TraceSchemaError as e:
        raise ConfigError("--trace", str(e)) from None
    algo = cfg.build_algo()
    sc = spectral_constants(mixing, algo.polyA, algo.polyB, algo.polyC, algo.polyD)
    L = algo.lipschitz if algo.lipschitz is not None else problem.lipschitz()
    alpha, bound, psi, Psi = resolve_stepsize(algo, sc, L, problem.n)
    report = {"alpha": alpha, "alpha_bound": bound, "psi": psi, "Psi": Psi, "L": L}
    if trace["t"].size > 1 and np.any(np.diff(trace["t"]) != 1):
        raise ConfigError("output.record_every", "diagnostics need a trace recorded at every iteration")
    if math.isnan(psi):
        report["descent"] = report["kl_witness"] = "no eigenvalue certificate"
        coeffs = None
    else:
        coeffs = descent_coefficients(sc, L, problem.n, alpha, psi, Psi, check=False)
        desc = descent_report(trace, coeffs, alpha)
        wit = kl_witness(trace, sc, L, problem.n, alpha, psi, Psi)
        report["descent"] = desc.to_dict()
        report["kl_witness"] = wit.to_dict()
    try:
        report["rate_fit"] = rate_fit(trace["opt_err"]).to_dict()
    except InsufficientSamples as e:
        report["rate_fit"] = {"error": "insufficient samples", "detail": str(e)}
    out = _out_dir(args)
    write_json(out / "diag.json", report)
    if coeffs is not None and trace["t"].size > 1:
        with open(out / "diag_margins.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "descent", "kl_descent", "kl_step", "kl_value", "kl_gradient"])
            m = wit.margins
            for k in range(trace["t"].size - 1):
                w.writerow([int(trace["t"][k]), repr(float(desc.margins[k]))]
                           + [repr(float(m[c][k])) for c in ("descent", "step", "value", "gradient")])
    print(json.dumps({k: report[k] for k in ("alpha", "rate_fit")}, default=str))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="udna", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out-dir", default=".", help="directory for output files")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("run", help="run one experiment")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run several presets on the same problem and rank them")
    common(p)
    p.add_argument("--presets", help="comma-separated preset names")
    p.add_argument("--threshold", type=float, default=1e-4, help="target optimality error")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("diag", help="descent margins, KL witnesses and rate fit of a trace")
    common(p)
    p.add_argument("--trace", required=True, help="trace CSV written by 'run'")
    p.set_defaults(func=cmd_diag)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
