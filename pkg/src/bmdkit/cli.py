"""Command-line pipeline: analyze a dose-response table, or run a study.

``analyze`` ingests a delimited text file with a header row, fits the
monotone spline model, solves for the benchmark dose, and writes four
artifacts into the output directory:

* ``report.json``   — every estimate and diagnostic, deterministic given
  the seed (reruns are byte-identical);
* ``timings.json``  — wall-clock stage times, excluded from the
  determinism contract;
* ``curves.csv``    — 200-point grid of the fitted curve with pointwise
  95% posterior bands, for plotting;
* ``bmd_samples.csv`` — posterior draws of the dose, for histogramming.

``simulate`` drives the coverage study from a JSON configuration and
writes ``results.csv`` (one row per grid cell) and ``summary.json``.

Exit codes: 0 success, 2 unreadable or invalid input, 3 benchmark dose
not estimable, 4 internal failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .bmd import BmdConfig, BmdEstimate, estimate_bmd
from .bmdl import _bmd_samples, _report_from_samples
from .errors import (
    BmdkitError,
    BmdlNotEstimable,
    BmdNotEstimable,
    ConfigError,
    DataFormatError,
    InvalidArgument,
    NoTrueBmd,
)
from .model import (
    DoseResponseData,
    FitConfig,
    FittedModel,
    fit,
    posterior_sample,
)
from .sim import SimConfig, results_table, run_study
from .splines import eval_basis

__all__ = ["AnalysisRequest", "run_analysis", "run_sim", "main"]

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_DATA = 2
EXIT_NOT_ESTIMABLE = 3
EXIT_INTERNAL = 4

_CURVE_POINTS = 200


@dataclass(frozen=True)
class AnalysisRequest:
    """Everything one analysis run needs, straight from the flags."""

    data_path: str
    response_col: str
    exposure_col: str
    output_dir: str
    seed: int
    covariate_cols: tuple = ()
    log1p_exposure: bool = False
    p0: float = 0.025
    p_plus: float = 0.01
    x0: float = 0.0
    xmax: float | None = None
    basis_count: int = 20
    boot_M: int = 1000
    alpha_level: float = 0.95
    threads: int = 1


def _atomic_write(path: str, text: str) -> None:
    """Write ``text`` to ``path`` via a same-directory temp file and rename."""
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _numeric_column(frame: pd.DataFrame, name: str) -> np.ndarray:
    try:
        values = pd.to_numeric(frame[name], errors="raise").to_numpy(float)
    except (ValueError, TypeError) as exc:
        raise DataFormatError(
            f"column {name!r} has non-numeric cells: {exc}"
        ) from exc
    if not np.all(np.isfinite(values)):
        raise DataFormatError(f"column {name!r} has missing or infinite cells")
    return values


def _load_table(req: AnalysisRequest) -> DoseResponseData:
    try:
        frame = pd.read_csv(req.data_path)
    except FileNotFoundError as exc:
        raise DataFormatError(f"cannot read {req.data_path}: {exc}") from exc
    except (pd.errors.ParserError, pd.errors.EmptyDataError,
            UnicodeDecodeError) as exc:
        raise DataFormatError(
            f"cannot parse {req.data_path}: {exc}"
        ) from exc
    wanted = [req.response_col, req.exposure_col, *req.covariate_cols]
    missing = [c for c in wanted if c not in frame.columns]
    if missing:
        raise DataFormatError(
            f"missing columns {missing}; file has {list(frame.columns)}"
        )
    y = _numeric_column(frame, req.response_col)
    x = _numeric_column(frame, req.exposure_col)
    if req.log1p_exposure:
        if np.any(x <= -1.0):
            raise DataFormatError(
                "log1p exposure transform needs values above -1"
            )
        x = np.log1p(x)
    z = None
    if req.covariate_cols:
        z = np.column_stack([_numeric_column(frame, c)
                             for c in req.covariate_cols])
    return DoseResponseData(y=y, x=x, z=z)


def _curve_grid(model: FittedModel, samples, n_points: int) -> str:
    """Delimited curve table: fit plus pointwise 95% posterior band.

    The spline component alone carries an arbitrary level, so rows hold
    the identified fitted mean response: intercept plus exposure curve,
    covariate smooths held at their sample-mean contribution.  Band
    endpoints come from the same functional of each posterior draw.
    """
    kv = model.kv_x
    L = kv.basis_count
    grid = np.linspace(*kv.support, n_points)
    fitted = model.alpha_reported + model.f_hat(grid, centered=True)
    basis = np.array([eval_basis(float(g), kv) for g in grid])
    zbar = (model.design.Z.mean(axis=0) if model.design.Z.size
            else np.zeros(model.design.Z.shape[1]))
    level = samples.psi[:, 0] + samples.psi[:, 1 + L:] @ zbar
    draws = basis @ samples.beta_c.T + level[None, :]
    lo, hi = np.percentile(draws, [2.5, 97.5], axis=1)
    lines = ["exposure,f_hat,lo_2_5,hi_97_5"]
    for g, f, a, b in zip(grid, fitted, lo, hi):
        lines.append(f"{float(g)!r},{float(f)!r},{float(a)!r},{float(b)!r}")
    return "\n".join(lines) + "\n"


def run_analysis(req: AnalysisRequest) -> dict:
    """Fit, solve, and write the four analysis artifacts.

    Returns the report dictionary that was written to ``report.json``.
    """
    timings: dict[str, float] = {}
    data = _load_table(req)
    rng = np.random.default_rng(req.seed)

    t0 = time.perf_counter()
    model = fit(data, FitConfig(basis_count=req.basis_count, x0=req.x0))
    timings["fit_s"] = time.perf_counter() - t0

    cfg = BmdConfig(x0=req.x0, xmax=req.xmax, p0=req.p0, p_plus=req.p_plus)
    t0 = time.perf_counter()
    est = estimate_bmd(model, cfg)
    timings["bmd_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    samples = posterior_sample(model, req.boot_M, rng,
                               phi_uncertainty=True)
    limits, doses = _report_from_samples(
        model, est, cfg, samples, req.alpha_level, req.threads)
    timings["bmdl_s"] = time.perf_counter() - t0

    report = {
        "input": {
            "data_path": req.data_path,
            "n_obs": data.n_obs,
            "response_col": req.response_col,
            "exposure_col": req.exposure_col,
            "covariate_cols": list(req.covariate_cols),
            "log1p_exposure": req.log1p_exposure,
        },
        "settings": {
            "p0": req.p0,
            "p_plus": req.p_plus,
            "x0": req.x0,
            "xmax": req.xmax,
            "basis_count": req.basis_count,
            "boot_M": req.boot_M,
            "alpha_level": req.alpha_level,
            "seed": req.seed,
        },
        "fit": {
            "sigma_hat": model.sigma_hat,
            "loglambda_hat": [float(v) for v in model.params_hat.loglambda],
            "laml": model.laml_value,
            "outer_iterations": model.outer_iterations,
            "curve_decreasing": model.f_decreasing,
        },
        "bmd": {
            "xb_hat": est.xb_hat,
            "iterations": est.iterations,
            "u_prime_at_root": est.u_prime_at_root,
            "existence_margin": est.existence_margin,
        },
        "bmdl": {
            "delta": limits.delta,
            "delta_below_x0": limits.delta_below_x0,
            "pivot": limits.pivot,
            "boot": limits.boot,
            "var_at_xb": limits.var_at_xb,
            "boot_samples_used": limits.boot_samples_used,
            "boot_failures": limits.boot_failures,
            "pivot_sign_changes": limits.pivot_sign_changes,
        },
    }

    os.makedirs(req.output_dir, exist_ok=True)
    out = lambda name: os.path.join(req.output_dir, name)  # noqa: E731
    _atomic_write(out("report.json"),
                  json.dumps(report, indent=2, sort_keys=True) + "\n")
    _atomic_write(out("curves.csv"),
                  _curve_grid(model, samples, _CURVE_POINTS))
    valid = doses[np.isfinite(doses)]
    _atomic_write(out("bmd_samples.csv"),
                  "bmd\n" + "".join(f"{float(v)!r}\n" for v in valid))
    _atomic_write(out("timings.json"),
                  json.dumps(timings, indent=2, sort_keys=True) + "\n")
    return report


_SIM_FIELDS = ("n_grid", "s_grid", "sigma_grid", "replicates",
               "boot_M", "p0", "p_plus", "seed")


def run_sim(config_path: str, output_dir: str) -> list:
    """Run the study described by a JSON config; write the two artifacts."""
    try:
        with open(config_path) as handle:
            raw = json.load(handle)
    except FileNotFoundError as exc:
        raise ConfigError(f"cannot read {config_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cannot parse {config_path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    missing = [name for name in _SIM_FIELDS if name not in raw]
    if missing:
        raise ConfigError(f"config is missing fields: {missing}")
    extra = [name for name in raw if name not in _SIM_FIELDS]
    if extra:
        raise ConfigError(f"config has unknown fields: {extra}")
    cfg = SimConfig(**raw)

    t0 = time.perf_counter()
    rows = run_study(cfg)
    elapsed = time.perf_counter() - t0

    summary = {
        "config": {name: getattr(cfg, name) for name in _SIM_FIELDS},
        "cells": [row.__dict__ for row in rows],
        "elapsed_s": elapsed,
    }
    os.makedirs(output_dir, exist_ok=True)
    _atomic_write(os.path.join(output_dir, "results.csv"),
                  results_table(rows))
    _atomic_write(os.path.join(output_dir, "summary.json"),
                  json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return rows


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get("BMDKIT_THREADS", "1")))
    except ValueError:
        return 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bmdkit",
        description="Benchmark-dose estimation with monotone regression "
                    "splines",
    )
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    an = sub.add_parser("analyze", help="fit one dataset and report the "
                                        "dose and its lower limits")
    an.add_argument("--data", required=True, help="delimited input table")
    an.add_argument("--response-col", required=True)
    an.add_argument("--exposure-col", required=True)
    an.add_argument("--covariate-cols", default="",
                    help="comma-separated covariate column names")
    an.add_argument("--log1p-exposure", action="store_true",
                    help="model log(1 + exposure) instead of exposure")
    an.add_argument("--p0", type=float, default=0.025)
    an.add_argument("--p-plus", type=float, default=0.01)
    an.add_argument("--x0", type=float, default=0.0)
    an.add_argument("--xmax", type=float, default=None)
    an.add_argument("--basis-count", type=int, default=20)
    an.add_argument("--boot-m", type=int, default=1000)
    an.add_argument("--alpha-level", type=float, default=0.95)
    an.add_argument("--seed", type=int, required=True)
    an.add_argument("--threads", type=int, default=_default_threads(),
                    help="bootstrap worker threads (env BMDKIT_THREADS)")
    an.add_argument("--output-dir", required=True)

    si = sub.add_parser("simulate", help="run the coverage/timing study "
                                         "from a JSON config")
    si.add_argument("--config", required=True, help="JSON study config")
    si.add_argument("--output-dir", required=True)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "analyze":
            covs = tuple(c.strip() for c in args.covariate_cols.split(",")
                         if c.strip())
            req = AnalysisRequest(
                data_path=args.data,
                response_col=args.response_col,
                exposure_col=args.exposure_col,
                covariate_cols=covs,
                log1p_exposure=args.log1p_exposure,
                p0=args.p0,
                p_plus=args.p_plus,
                x0=args.x0,
                xmax=args.xmax,
                basis_count=args.basis_count,
                boot_M=args.boot_m,
                alpha_level=args.alpha_level,
                seed=args.seed,
                threads=args.threads,
                output_dir=args.output_dir,
            )
            report = run_analysis(req)
            print(json.dumps(report["bmd"] | report["bmdl"], indent=2,
                             sort_keys=True))
        else:
            run_sim(args.config, args.output_dir)
    except (DataFormatError, ConfigError, InvalidArgument) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (BmdNotEstimable, BmdlNotEstimable, NoTrueBmd) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOT_ESTIMABLE
    except BmdkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK
