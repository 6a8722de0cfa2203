"""Command-line front end: ``deconvcde {fit,bandwidth,simulate,decompose,sigma-u}``.

Errors print one line ``CODE: message`` on stderr and exit with status 1
(status 2 for usage errors).
"""
from __future__ import annotations

import argparse
import csv
import io
import math
import os
import sys
import warnings
from typing import Optional

import numpy as np

from .bandwidth import WeightWindow, cv_surface, default_grids, select_bandwidths, weight_window
from .data import read_replicate_csv, read_wy_csv
from .errors import BadScenario, DeconvError, MissingSigmaU
from .estimators import (
    ESTIMATORS,
    P1,
    P2,
    P3,
    P4,
    BandwidthSet,
    default_kernels,
    estimate_deconv_onestep,
    estimate_deconv_twostep,
    estimate_naive_onestep,
    estimate_naive_twostep,
)
from .kernels import ErrorModel, NO_ERROR
from .regression import fit_mean
from .simulation import (
    METHOD_NUMBER,
    estimate_sigma_u_replicates,
    read_scenario_file,
    run_mc_study,
    study_to_csv,
    table1_layout,
)

__all__ = ["main", "build_parser"]

GRID_STEP = 0.04
SEED_ENV = "DECONV_SEED"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        sys.stderr.write(f"USAGE: {message}\n")
        sys.exit(2)


def _estimator(name):
    for e in ESTIMATORS:
        if name == e or name == e.split("_")[0]:
            return e
    raise argparse.ArgumentTypeError(f"unknown estimator {name!r} (use p1..p4)")


def _gridspec(text):
    try:
        lo, hi, step = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid spec must be 'min,max,step', got {text!r}") from None
    if not (step > 0 and hi > lo):
        raise argparse.ArgumentTypeError(f"grid spec needs max > min and step > 0, got {text!r}")
    return lo, hi, step


def _pair(text):
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi', got {text!r}") from None
    if hi < lo:
        raise argparse.ArgumentTypeError(f"expected lo <= hi, got {text!r}")
    return lo, hi


def _floats(text):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals or any(not v > 0 for v in vals):
        raise argparse.ArgumentTypeError("bandwidths must be positive")
    return np.array(vals)


def make_grid(lo, hi, step):
    """Equally spaced grid from ``lo`` to (at least) ``hi``."""
    m = int(math.floor((hi - lo) / step + 1e-9))
    if lo + m * step < hi - 1e-9 * step:
        m += 1
    return np.round(lo + step * np.arange(m + 1), 12)


def _outward(lo, hi, step):
    return math.floor(lo / step + 1e-9) * step, math.ceil(hi / step - 1e-9) * step


def _data_args(p):
    p.add_argument("--input", "-i", required=True, help="CSV with header W,Y")
    p.add_argument("--estimator", "-e", type=_estimator, default=P4, help="p1, p2, p3 or p4 (default p4)")
    p.add_argument("--error-kind", choices=["none", "laplace", "gaussian"], default="laplace")
    p.add_argument("--sigma-u", type=float, help="measurement error standard deviation")
    p.add_argument("--replicates", help="CSV of repeated measurements W1..Wk used to estimate --sigma-u")
    p.add_argument("--mean-method", choices=["local-linear", "spline"], default="local-linear")
    p.add_argument("--spline-df", type=int, default=5)
    p.add_argument("--h3", type=float, help="local linear bandwidth (default: rule of thumb)")
    p.add_argument("--h1-grid", type=_floats, help="comma-separated CV grid for h1")
    p.add_argument("--h2-grid", type=_floats, help="comma-separated CV grid for h2")
    p.add_argument("--window", type=_pair, help="CV weight window 'lo,hi' (default: 2.5%%/97.5%% quantiles of W)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="deconvcde", description="Conditional density estimation with an error-prone covariate.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    fit = sub.add_parser("fit", help="select bandwidths and write the estimated density grid")
    _data_args(fit)
    fit.add_argument("--output", "-o", required=True, help="grid CSV path ('-' for stdout)")
    fit.add_argument("--xgrid", type=_gridspec, help="min,max,step (default: weight window, step 0.04)")
    fit.add_argument("--ygrid", type=_gridspec, help="min,max,step (default: range of Y, step 0.04)")
    fit.add_argument("--h1", type=float, help="explicit h1 (skips cross-validation with --h2)")
    fit.add_argument("--h2", type=float, help="explicit h2")
    fit.add_argument("--clamp", action="store_true", help="replace negative density values by 0")

    bw = sub.add_parser("bandwidth", help="report data-driven bandwidths")
    _data_args(bw)
    bw.add_argument("--surface", help="write the CV criterion surface to this CSV")

    sim = sub.add_parser("simulate", help="run a Monte Carlo study from a scenario file")
    sim.add_argument("--config", "-c", required=True, help="key = value scenario file")
    sim.add_argument("--output", "-o", required=True, help="study CSV path ('-' for stdout)")
    sim.add_argument("--R", type=int, help="override the replicate count")
    sim.add_argument("--jobs", "-j", type=int, default=1, help="worker processes")
    sim.add_argument("--seed", type=int, help="master seed (overridden by $DECONV_SEED)")
    sim.add_argument("--layout", choices=["long", "wide"], default="long",
                     help="long: one row per scenario and method; wide: 'median (iqr)' per configuration")

    dec = sub.add_parser("decompose", help="study with EISE split into variance and squared bias")
    dec.add_argument("--config", "-c", required=True)
    dec.add_argument("--output", "-o", required=True)
    dec.add_argument("--R", type=int)
    dec.add_argument("--jobs", "-j", type=int, default=1)
    dec.add_argument("--seed", type=int)

    su = sub.add_parser("sigma-u", help="estimate the error standard deviation from replicates")
    su.add_argument("--input", "-i", required=True, help="CSV with header W1,...,Wk")
    return parser


# --------------------------------------------------------------------------


def _write(path, text):
    if path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", newline="") as fh:
            fh.write(text)


def _error_model(args, estimator):
    if estimator in (P1, P2):
        return NO_ERROR, 0.0
    sigma_u = args.sigma_u
    if sigma_u is None and args.replicates:
        sigma_u = estimate_sigma_u_replicates(read_replicate_csv(args.replicates))
    if sigma_u is None:
        raise MissingSigmaU(f"{estimator} needs --sigma-u or --replicates")
    if sigma_u < 0:
        raise MissingSigmaU(f"--sigma-u must be >= 0, got {sigma_u}")
    if args.error_kind == "none" or sigma_u == 0:
        return NO_ERROR, 0.0
    kind = ErrorModel.gaussian if args.error_kind == "gaussian" else ErrorModel.laplace
    return kind(sigma_u), float(sigma_u)


def _window(args, data):
    return weight_window(data.W) if args.window is None else WeightWindow(*args.window)


def _mean_fit(args, data, estimator):
    if estimator not in (P2, P4):
        return None
    return fit_mean(data.W, data.Y, method=args.mean_method, h3=args.h3, df=args.spline_df)


def _report(naive: Optional[BandwidthSet], final: BandwidthSet, extra=()):
    lines = []
    for label, bw in (("naive", naive), ("final", final)):
        if bw is None:
            continue
        for name in ("h1", "h2", "h3"):
            v = getattr(bw, name)
            if v is not None:
                lines.append(f"{label}_{name}={v!r}")
        lines.append(f"{label}_provenance={bw.provenance}")
    lines.extend(f"{k}={v}" for k, v in extra)
    return "\n".join(lines) + "\n"


def _bandwidths(args, data, estimator, sigma_u, mean_fit):
    return select_bandwidths(data, estimator, sigma_u, mean_fit, _window(args, data),
                             args.h1_grid, args.h2_grid)


_NAIVE_OF = {P3: P1, P4: P2}


def _resolve(args):
    """Estimator and error model; corrected estimators without error fall back to naive ones."""
    est = args.estimator
    err, sigma_u = _error_model(args, est)
    if est in _NAIVE_OF and err.is_null:
        warnings.warn(f"{est.split('_')[0]} without measurement error runs as {_NAIVE_OF[est].split('_')[0]}")
        est = _NAIVE_OF[est]
    return est, err, sigma_u


def cmd_fit(args):
    data = read_wy_csv(args.input)
    est, err, sigma_u = _resolve(args)
    mf = _mean_fit(args, data, est)
    if (args.h1 is None) != (args.h2 is None):
        raise BadScenario("--h1 and --h2 must be given together")
    if args.h1 is not None:
        h3 = mf.bandwidth_h3 if mf is not None else None
        naive, bw = None, BandwidthSet(args.h1, args.h2, h3, "user")
    else:
        naive, bw = _bandwidths(args, data, est, sigma_u, mf)
    if args.xgrid is None:
        win = _window(args, data)
        xgrid = make_grid(*_outward(win.x_L, win.x_U, GRID_STEP), GRID_STEP)
    else:
        xgrid = make_grid(*args.xgrid)
    if args.ygrid is None:
        ygrid = make_grid(*_outward(float(data.Y.min()), float(data.Y.max()), GRID_STEP), GRID_STEP)
    else:
        ygrid = make_grid(*args.ygrid)
    K1, K2 = default_kernels(est)
    if est == P1:
        grid = estimate_naive_onestep(data, bw, K1, K2, xgrid, ygrid, clamp=args.clamp)
    elif est == P2:
        grid = estimate_naive_twostep(data, bw, mf, K1, K2, xgrid, ygrid, clamp=args.clamp)
    elif est == P3:
        grid = estimate_deconv_onestep(data, bw, K1, K2, err, xgrid, ygrid, clamp=args.clamp)
    else:
        grid = estimate_deconv_twostep(data, bw, mf, K1, K2, err, xgrid, ygrid, clamp=args.clamp)
    _write(args.output, grid.to_csv())
    extra = [("estimator", est), ("sigma_u", repr(sigma_u)), ("nan_rows", grid.nan_columns)]
    # the report shares stdout only when the grid goes to a file
    (sys.stderr if args.output == "-" else sys.stdout).write(_report(naive, bw, extra))
    return 0


def cmd_bandwidth(args):
    data = read_wy_csv(args.input)
    est, _, sigma_u = _resolve(args)
    mf = _mean_fit(args, data, est)
    naive, bw = _bandwidths(args, data, est, sigma_u, mf)
    if args.surface:
        g1, g2 = default_grids(data, est)
        h1g = g1 if args.h1_grid is None else args.h1_grid
        h2g = g2 if args.h2_grid is None else args.h2_grid
        twostep = est in (P2, P4)
        surf = cv_surface(data, "twostep" if twostep else "onestep", h1g, h2g, default_kernels(est)[0],
                          _window(args, data), mf.residuals if twostep else None)
        _write(args.surface, surf.to_csv())
    sys.stdout.write(_report(naive, bw, [("estimator", est), ("sigma_u", repr(sigma_u))]))
    return 0


def _seed(args):
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise BadScenario(f"${SEED_ENV} must be an integer, got {env!r}") from None
    return args.seed


def _study(args, keep):
    scenarios, opts = read_scenario_file(args.config)
    R = opts["R"] if args.R is None else args.R
    if args.jobs < 1:
        raise BadScenario("--jobs must be at least 1")
    master = _seed(args)
    return run_mc_study(scenarios, opts["estimators"], R, opts["bandwidth_mode"], args.jobs,
                        master, keep_grids=keep, mean_method=opts["mean_method"])


def cmd_simulate(args):
    rows = _study(args, keep=False)
    _write(args.output, table1_layout(rows) if args.layout == "wide" else study_to_csv(rows))
    return 0


def cmd_decompose(args):
    rows = _study(args, keep=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["primary", "secondary", "method", "median_eise", "mean_eiv", "eisb", "failures"])
    for row in rows:
        if row.failures:
            w.writerow([row.primary, row.secondary, METHOD_NUMBER[row.method], "NA", "NA", "NA", row.failures])
            continue
        rep = row.report()
        w.writerow([row.primary, row.secondary, METHOD_NUMBER[row.method], f"{rep.median:.6f}",
                    f"{float(np.mean(rep.eiv)):.6f}", f"{rep.eisb:.6f}", 0])
    _write(args.output, buf.getvalue())
    return 0


def cmd_sigma_u(args):
    Wrep = read_replicate_csv(args.input)
    su = estimate_sigma_u_replicates(Wrep)
    present = np.isfinite(Wrep)
    k = present.sum(axis=1)
    rows = k > 0
    means = np.where(present, Wrep, 0.0).sum(axis=1)[rows] / k[rows]
    lines = [f"sigma_u={su!r}", f"sigma_u2={su * su!r}"]
    if means.size >= 2 and np.var(means, ddof=1) > 0:
        # reliability of the row means: var(mean) = var(X) + sigma_u^2 / k
        lam = 1.0 - float(np.mean(su * su / k[rows])) / float(np.var(means, ddof=1))
        lines.append(f"lambda_hat={min(max(lam, 0.0), 1.0)!r}")
    else:
        lines.append("lambda_hat=NA")
    sys.stdout.write("\n".join(lines) + "\n")
    return 0


COMMANDS = {
    "fit": cmd_fit,
    "bandwidth": cmd_bandwidth,
    "simulate": cmd_simulate,
    "decompose": cmd_decompose,
    "sigma-u": cmd_sigma_u,
}


def _warn_line(message, category, filename, lineno, file=None, line=None):
    sys.stderr.write(f"WARNING: {message}\n")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    warnings.showwarning = _warn_line
    try:
        return COMMANDS[args.command](args)
    except DeconvError as exc:
        msg = str(exc).replace("\n", " ")
        sys.stderr.write(f"{exc.code}: {msg}\n")
        return 1
    except (ValueError, OSError, np.linalg.LinAlgError) as exc:
        msg = str(exc).replace("\n", " ")
        sys.stderr.write(f"ERROR: {type(exc).__name__}: {msg}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
