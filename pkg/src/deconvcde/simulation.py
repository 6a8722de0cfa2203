"""Simulation scenarios, error metrics and the Monte Carlo study runner.

Primary models give ``Y | X = x``; secondary configurations give the law of
``X``, the error distribution and the reliability ratio::

    C1  N(sin(pi x / 2), s(x)**2)                  s(x) = exp(1 - x/3) / 8
    C2  0.5 N(m(x) - 1, r(x)**2) + 0.5 N(m(x) + 1, r(x)**2),  r = exp(1 - x/3) / 12
    C3  N(x, s(x)**2)
    C4  N(1, s(x)**2)

    a   X ~ N(0, 1),        U Laplace,  lambda = 0.8
    b   X ~ N(0, 1),        U Laplace,  lambda = 0.9
    c   X ~ N(0, 1),        U normal,   lambda = 0.8
    d   X ~ Uniform(-2, 2), U Laplace,  lambda = 0.8
"""
from __future__ import annotations

import csv
import io
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy import integrate
from scipy.stats import norm

from .bandwidth import select_bandwidths
from .data import Dataset
from .errors import AllNonFinite, BadScenario, GridMismatch, NeedReplicates, QuadratureFailure
from .estimators import (
    ESTIMATORS,
    P1,
    P2,
    P3,
    P4,
    BandwidthSet,
    DensityGrid,
    _onestep_numerators,
    _twostep_deconv_values,
    _twostep_naive_values,
    _guarded_ratio,
    _k1_matrix,
    default_kernels,
    estimate_deconv_onestep,
    estimate_deconv_twostep,
    estimate_naive_onestep,
    estimate_naive_twostep,
)
from .kernels import ErrorModel
from .regression import fit_mean, local_linear_fit

__all__ = [
    "PRIMARY",
    "SECONDARY",
    "DEFAULT_R",
    "DESK_R",
    "Scenario",
    "EiseReport",
    "StudyRow",
    "DEFAULT_XGRID",
    "DEFAULT_YGRID",
    "sample_laplace",
    "generate_scenario",
    "true_density",
    "true_mstar",
    "true_fx",
    "eise",
    "eise_mean",
    "optimal_bandwidths_oracle",
    "decompose_eise",
    "run_mc_study",
    "estimate_sigma_u_replicates",
    "read_scenario_file",
    "study_to_csv",
]

PRIMARY = ("C1", "C2", "C3", "C4")
SECONDARY = ("a", "b", "c", "d")
METHOD_NUMBER = {P1: 1, P2: 2, P3: 3, P4: 4}

# replicates per scenario: the published study size and a quicker preset
DEFAULT_R = 200
DESK_R = 50
GRID_STEP = 0.04
DEFAULT_XGRID = np.round(np.linspace(-2.0, 2.0, 101), 12)
DEFAULT_YGRID = np.round(np.linspace(-4.0, 3.0, 176), 12)

_UNIFORM_HALF_WIDTH = 2.0


@dataclass(frozen=True)
class Scenario:
    """One data-generating configuration.

    ``lambda_override`` replaces the configuration's reliability ratio.
    ``assumed_lambda`` / ``assumed_sigma_u`` set the error scale handed to the
    corrected estimators when it should differ from the truth.
    """

    primary: str
    secondary: str
    n: int = 500
    lambda_override: Optional[float] = None
    seed: int = 2017
    assumed_lambda: Optional[float] = None
    assumed_sigma_u: Optional[float] = None

    def __post_init__(self):
        if self.primary not in PRIMARY:
            raise BadScenario(f"primary must be one of {PRIMARY}, got {self.primary!r}")
        if self.secondary not in SECONDARY:
            raise BadScenario(f"secondary must be one of {SECONDARY}, got {self.secondary!r}")
        if not (isinstance(self.n, (int, np.integer)) and self.n >= 3):
            raise BadScenario(f"n must be an integer >= 3, got {self.n!r}")
        for name in ("lambda_override", "assumed_lambda"):
            v = getattr(self, name)
            if v is not None and not 0.0 < v <= 1.0:
                raise BadScenario(f"{name} must lie in (0, 1], got {v}")
        if self.assumed_sigma_u is not None and not self.assumed_sigma_u >= 0:
            raise BadScenario(f"assumed_sigma_u must be >= 0, got {self.assumed_sigma_u}")

    @property
    def lam(self) -> float:
        if self.lambda_override is not None:
            return float(self.lambda_override)
        return 0.9 if self.secondary == "b" else 0.8

    @property
    def sigma_x(self) -> float:
        return _sigma_x(self.secondary)

    @property
    def sigma_u(self) -> float:
        """True error standard deviation."""
        return math.sqrt(max(1.0 / self.lam - 1.0, 0.0)) * self.sigma_x

    @property
    def sigma_u_used(self) -> float:
        """Error standard deviation given to the corrected estimators."""
        if self.assumed_sigma_u is not None:
            return float(self.assumed_sigma_u)
        if self.assumed_lambda is not None:
            return math.sqrt(1.0 / self.assumed_lambda - 1.0) * self.sigma_x
        return self.sigma_u

    def error_model(self, sigma_u: Optional[float] = None) -> ErrorModel:
        s = self.sigma_u if sigma_u is None else sigma_u
        return ErrorModel.gaussian(s) if self.secondary == "c" else ErrorModel.laplace(s)

    @property
    def key(self) -> str:
        """Identifies the data-generating process; the assumed error scale is left out so
        misspecified runs see the same replicates as correctly specified ones."""
        return f"{self.primary}|{self.secondary}|{self.n}|{self.lam!r}"


def _sigma_x(secondary):
    return 2.0 * _UNIFORM_HALF_WIDTH / math.sqrt(12.0) if secondary == "d" else 1.0


# --------------------------------------------------------------------------
# generators and truth


def sample_laplace(n: int, location: float, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF Laplace draws; ``scale`` is the Laplace scale (sd / sqrt 2)."""
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    r = rng.random(n)
    with np.errstate(divide="ignore"):
        tail = np.where(r < 0.5, np.log(r), np.log1p(-r))
    return location - np.sign(r - 0.5) * scale * (math.log(2.0) + tail)


def _m(primary, x):
    x = np.asarray(x, dtype=float)
    if primary in ("C1", "C2"):
        return np.sin(np.pi * x / 2.0)
    if primary == "C3":
        return x.copy()
    return np.ones_like(x)


def _s(primary, x):
    return np.exp(1.0 - np.asarray(x, dtype=float) / 3.0) / (12.0 if primary == "C2" else 8.0)


def generate_scenario(s: Scenario, rng: Optional[np.random.Generator] = None) -> Dataset:
    """Draw ``X``, then ``Y | X``, then ``U``; returns ``W = X + U`` with ``X`` retained."""
    rng = np.random.default_rng(s.seed) if rng is None else rng
    n = s.n
    if s.secondary == "d":
        X = rng.uniform(-_UNIFORM_HALF_WIDTH, _UNIFORM_HALF_WIDTH, n)
    else:
        X = rng.normal(0.0, 1.0, n)
    noise = rng.normal(0.0, 1.0, n)
    mean = _m(s.primary, X)
    if s.primary == "C2":
        mean = mean + np.where(rng.random(n) < 0.5, -1.0, 1.0)
    Y = mean + _s(s.primary, X) * noise
    su = s.sigma_u
    if su == 0:
        U = np.zeros(n)
    elif s.secondary == "c":
        U = rng.normal(0.0, su, n)
    else:
        U = sample_laplace(n, 0.0, su / math.sqrt(2.0), rng)
    return Dataset(X + U, Y, X=X)


def true_density(primary: str, x, y):
    """Exact ``p(y | x)`` of a primary model (broadcasts over ``x`` and ``y``)."""
    if primary not in PRIMARY:
        raise BadScenario(f"unknown primary model {primary!r}")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    m, s = _m(primary, x), _s(primary, x)
    if primary == "C2":
        return 0.5 * norm.pdf(y, m - 1.0, s) + 0.5 * norm.pdf(y, m + 1.0, s)
    return norm.pdf(y, m, s)


def true_fx(secondary: str, x):
    """Density of the true covariate."""
    x = np.asarray(x, dtype=float)
    if secondary == "d":
        return np.where(np.abs(x) <= _UNIFORM_HALF_WIDTH, 0.25, 0.0)
    return norm.pdf(x)


def _fu(secondary, sigma_u, u):
    if secondary == "c":
        return norm.pdf(u, 0.0, sigma_u)
    b = sigma_u / math.sqrt(2.0)
    return np.exp(-np.abs(u) / b) / (2.0 * b)


@lru_cache(maxsize=256)
def _mstar_cached(primary, secondary, lam, xs):
    sigma_u = math.sqrt(max(1.0 / lam - 1.0, 0.0)) * _sigma_x(secondary)
    out = np.empty(len(xs))
    for k, x in enumerate(xs):
        out[k] = _mstar_point(primary, secondary, sigma_u, x)
    return out


def _mstar_point(primary, secondary, sigma_u, x):
    if primary == "C4":
        return 1.0
    if sigma_u == 0:
        return float(_m(primary, x))
    if primary == "C3" and secondary == "c":
        lam = 1.0 / (1.0 + sigma_u**2)
        return lam * x

    def dens(v):
        return float(true_fx(secondary, v)) * float(_fu(secondary, sigma_u, x - v))

    def num(v):
        return float(_m(primary, v)) * dens(v)

    if secondary == "d":
        pieces = [(-_UNIFORM_HALF_WIDTH, _UNIFORM_HALF_WIDTH)]
    else:
        pieces = [(-np.inf, x), (x, np.inf)]
    top = bot = 0.0
    for lo, hi in pieces:
        pts = [x] if (secondary == "d" and lo < x < hi) else None
        for f, acc in ((num, "top"), (dens, "bot")):
            val, err, info = integrate.quad(f, lo, hi, points=pts, epsabs=1e-10, epsrel=1e-10,
                                            limit=200, full_output=True)[:3]
            if err > 1e-8:
                raise QuadratureFailure(f"m*({x}) quadrature error estimate {err:.2e}")
            if acc == "top":
                top += val
            else:
                bot += val
    if not bot > 0:
        raise QuadratureFailure(f"f_W({x}) evaluated to {bot}")
    return top / bot


def true_mstar(primary: str, secondary: str, x, lam: Optional[float] = None):
    """``E(Y | W = x)`` by adaptive quadrature; ``C3`` with normal error is exact."""
    if primary not in PRIMARY or secondary not in SECONDARY:
        raise BadScenario(f"unknown scenario ({primary}, {secondary})")
    if lam is None:
        lam = 0.9 if secondary == "b" else 0.8
    xa = np.asarray(x, dtype=float)
    vals = _mstar_cached(primary, secondary, float(lam), tuple(np.atleast_1d(xa).ravel().tolist()))
    return float(vals[0]) if xa.ndim == 0 else vals.reshape(xa.shape).copy()


# --------------------------------------------------------------------------
# metrics


def _check_xgrid(xgrid):
    xgrid = np.asarray(xgrid, dtype=float)
    if xgrid.min() < -2.0 - 1e-9 or xgrid.max() > 2.0 + 1e-9:
        raise GridMismatch("EISE xgrid must lie within [-2, 2]")
    return xgrid


def _truth_grid(primary, xgrid, ygrid):
    return true_density(primary, xgrid[:, None], ygrid[None, :])


def _weights(secondary, xgrid, dx, dy):
    return true_fx(secondary, xgrid) * dx * dy


def eise(grid: DensityGrid, primary: str, secondary: str) -> float:
    """Empirical integrated squared error; NaN cells count as the squared truth."""
    x = _check_xgrid(grid.xgrid)
    p = _truth_grid(primary, x, grid.ygrid)
    v = np.where(np.isnan(grid.values), 0.0, grid.values)
    return float(np.sum((v - p) ** 2 * _weights(secondary, x, grid.dx, grid.dy)[:, None]))


def eise_mean(mhat, primary: str, secondary: str, xgrid=DEFAULT_XGRID, lam: Optional[float] = None) -> float:
    """Empirical integrated squared error of a mean estimate over ``xgrid``."""
    xgrid = _check_xgrid(xgrid)
    mhat = np.asarray(mhat, dtype=float).ravel()
    if mhat.size != xgrid.size:
        raise GridMismatch(f"mhat has {mhat.size} values, xgrid has {xgrid.size}")
    dx = float(xgrid[1] - xgrid[0]) if xgrid.size > 1 else 1.0
    ms = true_mstar(primary, secondary, xgrid, lam)
    return float(np.sum((mhat - ms) ** 2 * true_fx(secondary, xgrid)) * dx)


@dataclass(frozen=True)
class EiseReport:
    eise: np.ndarray
    eiv: np.ndarray
    eisb: float

    @property
    def median(self) -> float:
        return float(np.median(self.eise))

    @property
    def iqr(self) -> float:
        q1, q3 = np.percentile(self.eise, [25, 75])
        return float(q3 - q1)


def decompose_eise(replicate_grids: Sequence[DensityGrid], primary: str, secondary: str) -> EiseReport:
    """Split each replicate's EISE into variance (EIV) and shared squared bias (EISB)."""
    if len(replicate_grids) == 0:
        raise GridMismatch("no replicate grids given")
    g0 = replicate_grids[0]
    for g in replicate_grids[1:]:
        if g.values.shape != g0.values.shape or not (
            np.allclose(g.xgrid, g0.xgrid, rtol=0, atol=1e-12) and np.allclose(g.ygrid, g0.ygrid, rtol=0, atol=1e-12)
        ):
            raise GridMismatch("replicate grids differ")
    x = _check_xgrid(g0.xgrid)
    p = _truth_grid(primary, x, g0.ygrid)
    wts = _weights(secondary, x, g0.dx, g0.dy)[:, None]
    V = np.stack([np.where(np.isnan(g.values), 0.0, g.values) for g in replicate_grids])
    pbar = V.mean(axis=0)
    eises = np.array([np.sum((v - p) ** 2 * wts) for v in V])
    eiv = np.array([np.sum((v - pbar) ** 2 * wts) for v in V])
    eisb = float(np.sum((pbar - p) ** 2 * wts))
    return EiseReport(eises, eiv, eisb)


# --------------------------------------------------------------------------
# oracle bandwidths


def oracle_grids(data: Dataset, estimator_id: str):
    """Search grids for oracle bandwidths, in the estimator's own kernel units.

    ``h1`` covers ``0.2..3`` times the ``K1`` reference rule (wide enough for
    the error-inflated optimum); ``h2`` covers ``0.2..1.5`` times the ``K2``
    reference rule.
    """
    n = data.n
    K1, K2 = default_kernels(estimator_id)
    sw, sy = float(np.std(data.W, ddof=1)), float(np.std(data.Y, ddof=1))
    h1 = K1.reference_constant * sw * n ** -0.2 * np.linspace(0.2, 3.0, 15)
    h2 = K2.reference_constant * sy * n ** -0.2 * np.linspace(0.2, 1.5, 10)
    return h1, h2


def _h3_grid(data: Dataset):
    return float(np.std(data.W, ddof=1)) * data.n ** -0.2 * np.linspace(0.1, 2.0, 20)


def _oracle_h3(data, s: Scenario, xgrid, h3_grid):
    errs = [eise_mean(local_linear_fit(data.W, data.Y, h3, xgrid), s.primary, s.secondary, xgrid, s.lam)
            for h3 in h3_grid]
    return float(h3_grid[int(np.argmin(errs))])


def _oracle_search(data: Dataset, s: Scenario, estimator_id: str, h1_grid, h2_grid,
                   xgrid=DEFAULT_XGRID, ygrid=DEFAULT_YGRID, h3_grid=None):
    """Returns ``(BandwidthSet, DensityGrid, eise)`` for the EISE-minimising cell."""
    K1, K2 = default_kernels(estimator_id)
    err = s.error_model(s.sigma_u_used)
    W, Y = data.W, data.Y
    n = data.n
    h2_grid = [float(h) for h in h2_grid]
    h3 = None
    if estimator_id in (P2, P4):
        h3 = _oracle_h3(data, s, xgrid, _h3_grid(data) if h3_grid is None else h3_grid)
        mf = fit_mean(W, Y, h3=h3)
    truth = _truth_grid(s.primary, _check_xgrid(xgrid), ygrid)
    wts = _weights(s.secondary, xgrid, xgrid[1] - xgrid[0], ygrid[1] - ygrid[0])[:, None]
    best = (np.inf, None, None)
    for h1 in h1_grid:
        h1 = float(h1)
        if estimator_id in (P1, P3):
            e = err if estimator_id == P3 else ErrorModel()
            A = _k1_matrix(K1, e, h1, W, xgrid)
            fx = A.sum(axis=1) / (n * h1)
            nums = [num / (n * h1) for num in _onestep_numerators(A, Y, h2_grid, K2, ygrid)]
        elif estimator_id == P2:
            fx, nums = _twostep_naive_values(W, mf.residuals, mf, h1, h2_grid, K1, K2, xgrid, ygrid)
        else:
            fx, nums = _twostep_deconv_values(W, mf.residuals, mf, h1, h2_grid, K1, K2, err, xgrid, ygrid)
        for h2, num in zip(h2_grid, nums):
            vals, nbad = _guarded_ratio(num, fx)
            v = np.where(np.isnan(vals), 0.0, vals)
            score = float(np.sum((v - truth) ** 2 * wts))
            if np.isfinite(score) and score <= best[0]:
                best = (score, BandwidthSet(h1, h2, h3, "oracle"), (vals, nbad))
    if best[1] is None:
        raise AllNonFinite("every oracle grid cell is non-finite")
    bw = best[1]
    vals, nbad = best[2]
    return bw, DensityGrid(xgrid, ygrid, vals, estimator_id, bw, nbad), best[0]


def _oracle_refined(data: Dataset, s: Scenario, estimator_id: str):
    """Default-grid oracle followed by a 7x7 pass one coarse step either side of the argmin."""
    g1, g2 = oracle_grids(data, estimator_id)
    bw, grid, score = _oracle_search(data, s, estimator_id, g1, g2)
    d1, d2 = g1[1] - g1[0], g2[1] - g2[0]
    f1 = np.linspace(max(bw.h1 - d1, 0.5 * bw.h1), bw.h1 + d1, 7)
    f2 = np.linspace(max(bw.h2 - d2, 0.5 * bw.h2), bw.h2 + d2, 7)
    h3_grid = None if bw.h3 is None else [bw.h3]
    fine = _oracle_search(data, s, estimator_id, f1, f2, h3_grid=h3_grid)
    return fine if fine[2] < score else (bw, grid, score)


def optimal_bandwidths_oracle(s: Scenario, estimator_id: str, h1_grid=None, h2_grid=None,
                              data: Optional[Dataset] = None, h3_grid=None) -> BandwidthSet:
    """EISE-minimising bandwidths on a grid, using the known truth of ``s``.

    Two-step estimators first pick ``h3`` by minimising the mean EISE. Ties go
    to the larger bandwidth. With no grids given, the default grids are
    searched and then refined around their argmin.
    """
    data = generate_scenario(s) if data is None else data
    if h1_grid is None and h2_grid is None and h3_grid is None:
        return _oracle_refined(data, s, estimator_id)[0]
    g1, g2 = oracle_grids(data, estimator_id)
    h1_grid = g1 if h1_grid is None else np.atleast_1d(h1_grid)
    h2_grid = g2 if h2_grid is None else np.atleast_1d(h2_grid)
    return _oracle_search(data, s, estimator_id, h1_grid, h2_grid, h3_grid=h3_grid)[0]


# --------------------------------------------------------------------------
# Monte Carlo study


def replicate_seed(master: int, s: Scenario, r: int) -> np.random.SeedSequence:
    """Independent stream for replicate ``r`` of scenario ``s``."""
    return np.random.SeedSequence([int(master) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(s.key.encode()), int(r)])


def fit_estimator(data: Dataset, estimator_id: str, sigma_u: float, error: ErrorModel,
                  xgrid=DEFAULT_XGRID, ygrid=DEFAULT_YGRID, mean_fit=None, window=None):
    """Data-driven bandwidths followed by the estimate; used by the study and the CLI."""
    K1, K2 = default_kernels(estimator_id)
    if estimator_id in (P2, P4) and mean_fit is None:
        mean_fit = fit_mean(data.W, data.Y)
    naive, bw = select_bandwidths(data, estimator_id, sigma_u, mean_fit, window)
    if estimator_id == P1:
        g = estimate_naive_onestep(data, bw, K1, K2, xgrid, ygrid)
    elif estimator_id == P2:
        g = estimate_naive_twostep(data, bw, mean_fit, K1, K2, xgrid, ygrid)
    elif estimator_id == P3:
        g = estimate_deconv_onestep(data, bw, K1, K2, error, xgrid, ygrid)
    else:
        g = estimate_deconv_twostep(data, bw, mean_fit, K1, K2, error, xgrid, ygrid)
    return naive, g


def _one_replicate(args):
    s, r, estimators, mode, master, keep, mean_method = args
    rng = np.random.default_rng(replicate_seed(master, s, r))
    data = generate_scenario(s, rng)
    out = {}
    mf = None
    for est in estimators:
        try:
            if mode == "oracle":
                _, grid, _ = _oracle_refined(data, s, est)
            else:
                if est in (P2, P4) and mf is None:
                    mf = fit_mean(data.W, data.Y, method=mean_method)
                _, grid = fit_estimator(data, est, s.sigma_u_used, s.error_model(s.sigma_u_used), mean_fit=mf)
            out[est] = (eise(grid, s.primary, s.secondary), grid.values if keep else None, None)
        except Exception as exc:  # a failed replicate is counted, not fatal
            out[est] = (math.nan, None, f"{type(exc).__name__}: {exc}")
    return out


@dataclass
class StudyRow:
    primary: str
    secondary: str
    method: str
    eise: np.ndarray
    failures: int
    grids: Optional[List[Optional[np.ndarray]]] = None

    @property
    def finite(self) -> np.ndarray:
        return self.eise[np.isfinite(self.eise)]

    @property
    def median(self) -> float:
        f = self.finite
        return float(np.median(f)) if f.size else math.nan

    @property
    def iqr(self) -> float:
        f = self.finite
        if not f.size:
            return math.nan
        q1, q3 = np.percentile(f, [25, 75])
        return float(q3 - q1)

    def report(self) -> EiseReport:
        """EISE decomposition over the kept replicate grids (needs ``keep_grids``)."""
        if not self.grids or any(g is None for g in self.grids):
            raise ValueError("replicate grids were not kept or some replicates failed")
        grids = [DensityGrid(DEFAULT_XGRID, DEFAULT_YGRID, v, self.method) for v in self.grids]
        return decompose_eise(grids, self.primary, self.secondary)


def run_mc_study(scenarios: Iterable[Scenario], estimators: Sequence[str] = ESTIMATORS, R: int = DEFAULT_R,
                 bandwidth_mode: str = "data_driven", jobs: int = 1, master_seed: Optional[int] = None,
                 keep_grids: bool = False, mean_method: str = "local-linear") -> List[StudyRow]:
    """Run ``R`` replicates per scenario and summarise EISE per estimator.

    Replicate ``r`` of scenario ``s`` draws from :func:`replicate_seed` of
    ``(master_seed or s.seed, s, r)``, so results do not depend on ``jobs``.
    Failed replicates are counted in ``failures`` and excluded from the summary.
    """
    if bandwidth_mode not in ("oracle", "data_driven"):
        raise BadScenario(f"bandwidth_mode must be 'oracle' or 'data_driven', got {bandwidth_mode!r}")
    if R < 1:
        raise BadScenario("R must be at least 1")
    for est in estimators:
        if est not in ESTIMATORS:
            raise BadScenario(f"unknown estimator {est!r}")
    rows = []
    for s in scenarios:
        master = s.seed if master_seed is None else master_seed
        tasks = [(s, r, tuple(estimators), bandwidth_mode, master, keep_grids, mean_method) for r in range(R)]
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_one_replicate, tasks))
        else:
            results = [_one_replicate(t) for t in tasks]
        for est in estimators:
            vals = np.array([res[est][0] for res in results])
            fails = sum(res[est][2] is not None for res in results)
            grids = [res[est][1] for res in results] if keep_grids else None
            rows.append(StudyRow(s.primary, s.secondary, est, vals, fails, grids))
    return rows


def study_to_csv(rows: Sequence[StudyRow], path=None) -> str:
    """CSV with columns ``primary,secondary,method,median_eise,iqr_eise,failures``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["primary", "secondary", "method", "median_eise", "iqr_eise", "failures"])
    for row in rows:
        w.writerow([row.primary, row.secondary, METHOD_NUMBER[row.method],
                    f"{row.median:.6f}", f"{row.iqr:.6f}", row.failures])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def table1_layout(rows: Sequence[StudyRow]) -> str:
    """Wide table: one line per (model, method), one ``median (iqr)`` column per configuration."""
    configs = sorted({r.secondary for r in rows})
    cells: Dict[tuple, str] = {(r.primary, r.method, r.secondary): f"{r.median:.3f} ({r.iqr:.3f})" for r in rows}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "method"] + [f"({c})" for c in configs])
    for prim in sorted({r.primary for r in rows}):
        for est in ESTIMATORS:
            if any((prim, est, c) in cells for c in configs):
                w.writerow([f"({prim})", METHOD_NUMBER[est]] + [cells.get((prim, est, c), "") for c in configs])
    return buf.getvalue()


# --------------------------------------------------------------------------
# scenario files and replicate-based error variance

_SCENARIO_KEYS = {"primary", "secondary", "n", "lambda", "seed", "R", "bandwidth_mode",
                  "assumed_sigma_u", "assumed_lambda", "estimators", "mean_method"}


def read_scenario_file(path):
    """Parse a ``key = value`` scenario file.

    ``primary`` and ``secondary`` may list several comma-separated values; the
    study runs their product. Returns ``(scenarios, options)`` where options
    holds ``R``, ``bandwidth_mode``, ``estimators`` and ``mean_method``.
    """
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise BadScenario(f"cannot read {path}: {exc.strerror}") from exc
    kv = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            k, v = line.split("=", 1)
        elif ":" in line:
            k, v = line.split(":", 1)
        else:
            raise BadScenario(f"{path}:{lineno}: expected key = value")
        k, v = k.strip(), v.strip()
        if k not in _SCENARIO_KEYS:
            raise BadScenario(f"{path}:{lineno}: unknown key {k!r}")
        kv[k] = v
    for req in ("primary", "secondary"):
        if req not in kv:
            raise BadScenario(f"{path}: missing key {req!r}")
    try:
        n = int(kv.get("n", 500))
        seed = int(kv.get("seed", 2017))
        R = int(kv.get("R", DEFAULT_R))
        lam = float(kv["lambda"]) if "lambda" in kv else None
        asu = float(kv["assumed_sigma_u"]) if "assumed_sigma_u" in kv else None
        alam = float(kv["assumed_lambda"]) if "assumed_lambda" in kv else None
    except ValueError as exc:
        raise BadScenario(f"{path}: {exc}") from None
    mode = kv.get("bandwidth_mode", "data_driven").replace("-", "_")
    if mode not in ("oracle", "data_driven"):
        raise BadScenario(f"{path}: bandwidth_mode must be oracle or data_driven")
    ests = []
    for tok in kv.get("estimators", "p1,p2,p3,p4").split(","):
        tok = tok.strip()
        match = [e for e in ESTIMATORS if e == tok or e.split("_")[0] == tok]
        if not match:
            raise BadScenario(f"{path}: unknown estimator {tok!r}")
        ests.append(match[0])
    scenarios = [
        Scenario(p.strip(), q.strip(), n, lam, seed, alam, asu)
        for p in kv["primary"].split(",")
        for q in kv["secondary"].split(",")
    ]
    opts = {"R": R, "bandwidth_mode": mode, "estimators": ests,
            "mean_method": kv.get("mean_method", "local-linear")}
    return scenarios, opts


def estimate_sigma_u_replicates(Wrep) -> float:
    """Pooled within-subject standard deviation from repeated measurements.

    Rows may be ragged (NaN marks a missing replicate); rows with a single
    measurement contribute nothing.
    """
    Wrep = np.asarray(Wrep, dtype=float)
    if Wrep.ndim != 2:
        raise NeedReplicates("replicates must be an n x k array")
    present = np.isfinite(Wrep)
    k = present.sum(axis=1)
    dof = int(np.sum(np.maximum(k - 1, 0)))
    if dof == 0:
        raise NeedReplicates("every subject has at most one measurement")
    filled = np.where(present, Wrep, 0.0)
    means = filled.sum(axis=1) / np.maximum(k, 1)
    ss = float(np.sum(np.where(present, (Wrep - means[:, None]) ** 2, 0.0)))
    return math.sqrt(max(ss / dof, 0.0))
