"""Command-line front end: dataset estimation, simulation runs, kernel diagnostics.

Every run either succeeds (exit 0) or emits a machine-readable error
object ``{"code", "message", "context"}`` on stderr and exits nonzero.
Output files are written atomically (temp file + rename) so failures
leave no partial output; numbers are serialized with 17 significant
digits so byte-level reproducibility checks are exact.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from .data import RegressorSpec, read_csv
from .errors import InvalidConfig, RichIVError
from .estimators import (
    CrossFitPlan,
    cells_learner,
    cf_estimate,
    dml_estimate,
    ir_estimate,
    live_estimate,
    mlp_learner,
    nw_learner,
    psr_estimate,
)
from .firststep import fit_cell_means, fit_mlp, fit_nw, fit_probit, oracle
from .inference import cf_variance, ir_variance, naive_iv_variance
from .kernels import BandwidthRule, kernel_eval, make_epanechnikov
from .simulation import (
    DEFAULT_ROSTER,
    SimConfig,
    resolve_jobs,
    run_monte_carlo,
    summarize,
)

ESTIMATOR_CHOICES = ("live", "ir", "cf", "psr", "dml")
FIRST_STEP_CHOICES = ("nw", "probit", "cells", "mlp")  # plus oracle:<path>
VARIANCE_CHOICES = ("corrected", "hc0", "cluster")

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(64)


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def _write_atomic(path: str | Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(text: str, out: str | None) -> None:
    if out:
        _write_atomic(out, text)
    else:
        sys.stdout.write(text)


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise InvalidConfig(f"config file not found: {path}", path=path) from None
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"config file is not valid JSON: {exc}", path=path) from None
    if not isinstance(cfg, dict):
        raise InvalidConfig("config file must hold a JSON object", path=path)
    return cfg


def _merged(args: argparse.Namespace, config: dict, key: str, default):
    """Flag value if given, else config-file value, else the default."""
    flag = getattr(args, key)
    if flag is not None:
        return flag
    return config.get(key, default)


# --- estimate ----------------------------------------------------------------


def _first_step(ds, choice: str, kernel_order, bandwidth_scale, seed: int):
    rule = BandwidthRule(scale=bandwidth_scale)
    if choice == "nw":
        return fit_nw(ds, order=kernel_order, rule=rule)
    if choice == "probit":
        return fit_probit(ds)[1]
    if choice == "cells":
        return fit_cell_means(ds)
    if choice == "mlp":
        return fit_mlp(ds, seed=seed)
    if choice.startswith("oracle:"):
        path = choice.split(":", 1)[1]
        try:
            values = [float(line) for line in Path(path).read_text().split()]
        except FileNotFoundError:
            raise InvalidConfig(f"oracle file not found: {path}", path=path) from None
        except ValueError as exc:
            raise InvalidConfig(f"oracle file must hold one number per line: {exc}") from None
        return oracle(ds, values)
    raise InvalidConfig(
        f"unknown first step {choice!r}; use one of {FIRST_STEP_CHOICES} or oracle:<path>"
    )


def _dml_learner(choice: str, kernel_order, bandwidth_scale, seed: int):
    rule = BandwidthRule(scale=bandwidth_scale)
    if choice == "nw":
        return nw_learner(order=kernel_order, rule=rule)
    if choice == "cells":
        return cells_learner()
    if choice == "mlp":
        return mlp_learner(seed=seed)
    raise InvalidConfig(
        f"the dml estimator needs a trainable nuisance learner (nw|cells|mlp), got {choice!r}"
    )


def _check_variance_legality(estimator: str, first_step: str, variance: str, ds) -> None:
    if variance == "corrected":
        if estimator not in ("ir", "cf"):
            raise InvalidConfig(
                f"corrected variance is defined for ir/cf only, not {estimator!r}"
            )
        if not (first_step in ("nw",) or first_step.startswith("oracle:")):
            raise InvalidConfig(
                "corrected variance requires the nw or oracle first step "
                f"(its correction reuses the kernel context), got {first_step!r}"
            )
    if variance == "cluster" and ds.cluster is None:
        raise InvalidConfig("cluster-robust variance needs a cluster column in the CSV")


def cmd_estimate(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    input_path = _merged(args, config, "input", None)
    if not input_path:
        raise InvalidConfig("estimate needs --input <csv>")
    estimators = args.estimator or config.get("estimator") or ["ir"]
    first_step = _merged(args, config, "first_step", "nw")
    variance = _merged(args, config, "variance", "hc0")
    kernel_order = _merged(args, config, "kernel_order", None)
    bandwidth_scale = _merged(args, config, "bandwidth_scale", None)
    seed = int(_merged(args, config, "seed", 0))
    folds = int(_merged(args, config, "folds", 5))
    splits = _merged(args, config, "splits", None)
    fmt = _merged(args, config, "format", "json")

    ds = read_csv(input_path)
    rows = []
    shared_fs = None
    for tag in estimators:
        if tag not in ESTIMATOR_CHOICES:
            raise InvalidConfig(f"unknown estimator {tag!r}; choices: {ESTIMATOR_CHOICES}")
        _check_variance_legality(tag, first_step, variance, ds)
        t0 = time.perf_counter()
        se = None
        fs_diag: dict = {}
        if tag == "live":
            est = live_estimate(ds)
        elif tag == "psr":
            est = psr_estimate(ds)
            fs_diag = est.first_step.diagnostics if est.first_step else {}
        elif tag == "dml":
            learner = _dml_learner(first_step, kernel_order, bandwidth_scale, seed)
            plan = (
                CrossFitPlan(folds=folds, splits=int(splits), seed=seed)
                if splits
                else None
            )
            est = dml_estimate(ds, learner, plan)
        else:  # ir | cf
            if shared_fs is None:
                shared_fs = _first_step(ds, first_step, kernel_order, bandwidth_scale, seed)
            fs_diag = shared_fs.diagnostics
            est = (ir_estimate if tag == "ir" else cf_estimate)(ds, shared_fs)
        if est.instruments is not None:
            if variance == "corrected":
                v = (ir_variance if tag == "ir" else cf_variance)(est, ds)
            elif variance == "cluster":
                v = naive_iv_variance(est, cluster=ds.cluster)
            else:
                v = naive_iv_variance(est)
            se = float(v.se[0])
        rows.append(
            {
                "estimator": tag,
                "alpha": est.alpha,
                "se": se,
                "variance": variance if se is not None else None,
                "first_step": (None if tag in ("live",) else ("probit" if tag == "psr" else first_step)),
                "coefficients": {lab: float(b) for lab, b in zip(est.labels, est.beta)},
                "first_step_diagnostics": fs_diag,
                "seconds": time.perf_counter() - t0,
            }
        )

    report = {"input": str(input_path), "n": ds.n, "d": ds.d, "results": rows}
    if fmt == "json":
        text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    else:
        lines = ["estimator\talpha\tse\tvariance"]
        for r in rows:
            se_txt = _fmt(r["se"]) if r["se"] is not None else "NA"
            var_txt = r["variance"] or "NA"
            lines.append(f"{r['estimator']}\t{_fmt(r['alpha'])}\t{se_txt}\t{var_txt}")
        text = "\n".join(lines) + "\n"
    _emit(text, args.out)
    return 0


# --- simulate -----------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    cfg = SimConfig(
        d=int(_merged(args, config, "d", 1)),
        n=int(_merged(args, config, "n", 500)),
        psi=float(_merged(args, config, "psi", 1.0)),
        kappa_at=float(_merged(args, config, "kappa_at", 0.25)),
        kappa_nt=float(_merged(args, config, "kappa_nt", 0.25)),
        alpha_nt=float(_merged(args, config, "alpha_nt", -1.0)),
        alpha_c=float(_merged(args, config, "alpha_c", 0.0)),
        alpha_at=float(_merged(args, config, "alpha_at", 1.0)),
        seed=int(_merged(args, config, "seed", 0)),
    )
    reps = int(_merged(args, config, "reps", 100))
    roster = args.estimator or config.get("estimator") or list(DEFAULT_ROSTER)
    jobs = resolve_jobs(args.jobs if args.jobs is not None else config.get("jobs"))
    fmt = _merged(args, config, "format", "tsv")

    results = run_monte_carlo(cfg, roster, reps, jobs=jobs)
    summary = summarize(results)

    if args.dump:
        lines = [
            json.dumps(
                {
                    "rep": r.rep,
                    "estimator": r.estimator,
                    "alpha": r.alpha,
                    "status": r.status,
                    "se": r.se,
                },
                sort_keys=True,
            )
            for r in results
        ]
        _write_atomic(args.dump, "\n".join(lines) + "\n")

    if fmt == "json":
        payload = {
            "config": {k: getattr(cfg, k) for k in (
                "d", "n", "psi", "kappa_at", "kappa_nt", "alpha_nt", "alpha_c", "alpha_at", "seed"
            )},
            "reps": reps,
            "summary": [
                {
                    "estimator": s.estimator,
                    "median": s.median,
                    "iqr": s.iqr,
                    "errors": s.errors,
                    "reps": s.reps,
                }
                for s in summary
            ],
        }
        text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    else:
        lines = ["estimator\tmedian\tiqr\terrors\treps"]
        for s in summary:
            lines.append(
                f"{s.estimator}\t{_fmt(s.median)}\t{_fmt(s.iqr)}\t{s.errors}\t{s.reps}"
            )
        text = "\n".join(lines) + "\n"
    _emit(text, args.out)
    return 0


# --- kernel-check ----------------------------------------------------------------


def cmd_kernel_check(args: argparse.Namespace) -> int:
    lines = ["order\tj\tabs_moment"]
    for order in range(2, 13, 2):
        kernel = make_epanechnikov(order)
        K = kernel_eval(kernel, _GL_NODES)
        unit_gap = abs(float(_GL_WEIGHTS @ K) - 1.0)
        lines.append(f"{order}\t0\t{_fmt(unit_gap)}")
        for j in range(1, order):
            moment = abs(float(_GL_WEIGHTS @ (_GL_NODES**j * K)))
            lines.append(f"{order}\t{j}\t{_fmt(moment)}")
    _emit("\n".join(lines) + "\n", args.out)
    return 0


# --- entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="richiv",
        description="Semiparametric linear IV estimation with a nonparametric first step.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="estimate treatment effects from a CSV dataset")
    est.add_argument("--input", help="CSV with columns y,t,z,c1..cd[,cluster]")
    est.add_argument(
        "--estimator", action="append", choices=ESTIMATOR_CHOICES,
        help="repeatable; default ir",
    )
    est.add_argument(
        "--first-step", dest="first_step",
        help="nw|probit|cells|mlp|oracle:<path> (default nw)",
    )
    est.add_argument("--variance", choices=VARIANCE_CHOICES)
    est.add_argument("--kernel-order", dest="kernel_order", type=int)
    est.add_argument("--bandwidth-scale", dest="bandwidth_scale", type=float)
    est.add_argument("--seed", type=int)
    est.add_argument("--folds", type=int)
    est.add_argument("--splits", type=int, help="cross-fit splits for dml (omit for single fit)")
    est.add_argument("--format", choices=("json", "tsv"))
    est.add_argument("--out")
    est.add_argument("--config", help="JSON config file; explicit flags override it")
    est.set_defaults(fn=cmd_estimate)

    sim = sub.add_parser("simulate", help="run the Monte Carlo study")
    sim.add_argument("--d", type=int)
    sim.add_argument("--n", type=int)
    sim.add_argument("--psi", type=float)
    sim.add_argument("--kappa-at", dest="kappa_at", type=float)
    sim.add_argument("--kappa-nt", dest="kappa_nt", type=float)
    sim.add_argument("--alpha-nt", dest="alpha_nt", type=float)
    sim.add_argument("--alpha-c", dest="alpha_c", type=float)
    sim.add_argument("--alpha-at", dest="alpha_at", type=float)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--reps", type=int)
    sim.add_argument("--estimator", action="append", help="repeatable roster entry")
    sim.add_argument("--jobs", type=int, help="worker processes (RICHIV_THREADS caps this)")
    sim.add_argument("--format", choices=("tsv", "json"))
    sim.add_argument("--out")
    sim.add_argument("--dump", help="also write per-replication results as JSON lines")
    sim.add_argument("--config", help="JSON config file; explicit flags override it")
    sim.set_defaults(fn=cmd_simulate)

    kc = sub.add_parser("kernel-check", help="print the kernel moment-integral table")
    kc.add_argument("--out")
    kc.set_defaults(fn=cmd_kernel_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except RichIVError as exc:
        error = {"code": exc.code, "message": str(exc), "context": getattr(exc, "context", {})}
        sys.stderr.write(json.dumps(error, sort_keys=True, default=str) + "\n")
        return 1
    except OSError as exc:
        error = {"code": "io-error", "message": str(exc), "context": {}}
        sys.stderr.write(json.dumps(error, sort_keys=True) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
