"""Cross-validation bandwidth selection and measurement-error adjustments.

The CV criteria use a Gaussian ``K2`` so that the integral over ``y`` has a
closed form. With ``a[j, j'] = K1((W_j' - W_j) / h1)`` for ``j' != j``::

    CV = 1/(n h2) sum_j w(W_j) [ (1/sqrt(4 pi)) sum_{j1, j2} a[j,j1] a[j,j2]
            exp(-((Z_j1 - Z_j2) / (2 h2))**2) / S_j**2
          - 2 sum_j' a[j,j'] K2((Z_j' - Z_j) / h2) / S_j ]

where ``S_j = sum_j' a[j, j']`` and ``Z`` is ``Y`` (one-step) or the mean
residuals (two-step). The double sum is the row sum of ``(A @ G) * A``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import Dataset
from .errors import AllNonFinite, DegenerateWeights, InsufficientData, ZeroVariance
from .estimators import P1, P2, P3, P4, BandwidthSet
from .kernels import GAUSSIAN, SECOND_ORDER, KernelSpec, kernel_eval
from .regression import MeanFit, fit_mean

__all__ = [
    "WeightWindow",
    "CvSurface",
    "C_FACTOR",
    "weight_window",
    "cv_onestep",
    "cv_twostep",
    "cv_surface",
    "default_grids",
    "select_naive_bandwidths",
    "reliability_estimate",
    "adjust_onestep",
    "adjust_twostep",
    "select_bandwidths",
]

# Gaussian -> second-order kernel bandwidth factor from the reference rules.
C_FACTOR = SECOND_ORDER.reference_constant / GAUSSIAN.reference_constant

_SKIP_FLOOR = 1e-12
_INV_SQRT_4PI = 1.0 / math.sqrt(4.0 * math.pi)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class WeightWindow:
    """Indicator weight ``1[x_L <= x <= x_U]``."""

    x_L: float
    x_U: float

    def __post_init__(self):
        if not self.x_L <= self.x_U:
            raise ValueError(f"window needs x_L <= x_U, got ({self.x_L}, {self.x_U})")

    @property
    def degenerate(self) -> bool:
        return not self.x_L < self.x_U

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return (x >= self.x_L) & (x <= self.x_U)


def weight_window(W) -> WeightWindow:
    """2.5th and 97.5th percentiles of ``W`` (linear interpolation between order statistics)."""
    W = np.asarray(W, dtype=float).ravel()
    if W.size < 2:
        raise InsufficientData("weight_window needs at least two observations")
    lo, hi = np.percentile(W, [2.5, 97.5])
    return WeightWindow(float(lo), float(hi))


@dataclass(frozen=True)
class CvSurface:
    """CV criterion over ``h1_grid x h2_grid``."""

    h1_grid: np.ndarray
    h2_grid: np.ndarray
    criterion: np.ndarray
    skipped: int = 0

    @property
    def argmin_index(self):
        """Index of the smallest finite entry; ties go to larger h1, then larger h2."""
        c = self.criterion
        finite = np.isfinite(c)
        if not finite.any():
            raise AllNonFinite("every CV grid cell is non-finite")
        best = np.min(c[finite])
        ii, jj = np.nonzero(finite & (c == best))
        k = np.lexsort((jj, ii))[-1]
        return int(ii[k]), int(jj[k])

    @property
    def argmin(self):
        i, j = self.argmin_index
        return float(self.h1_grid[i]), float(self.h2_grid[j])

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["h1\\h2"] + [repr(float(h)) for h in self.h2_grid])
        for h1, row in zip(self.h1_grid, self.criterion):
            w.writerow([repr(float(h1))] + ["NA" if not np.isfinite(v) else repr(float(v)) for v in row])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def _cv_matrix(W, Z, h1_grid, h2_grid, K1: KernelSpec, window: WeightWindow):
    """CV values for every cell plus the number of skipped terms (largest over cells)."""
    W = np.asarray(W, dtype=float).ravel()
    Z = np.asarray(Z, dtype=float).ravel()
    n = W.size
    if n < 3:
        raise InsufficientData(f"CV needs n >= 3, got {n}")
    if window.degenerate:
        raise DegenerateWeights(f"weight window [{window.x_L}, {window.x_U}] has zero width")
    rows = np.nonzero(window(W))[0]
    if rows.size == 0:
        raise DegenerateWeights("no observation falls inside the weight window")
    dW = (W[None, :] - W[rows, None])
    dZ = Z[:, None] - Z[None, :]
    dZr = dZ[rows]
    out = np.full((len(h1_grid), len(h2_grid)), np.nan)
    skipped = 0
    for i, h1 in enumerate(h1_grid):
        A = kernel_eval(K1, dW / h1)
        A[np.arange(rows.size), rows] = 0.0
        S = A.sum(axis=1)
        ok = np.abs(S) > _SKIP_FLOOR
        skipped = max(skipped, int((~ok).sum()))
        if not ok.any():
            continue
        A, S, Zr = A[ok], S[ok], dZr[ok]
        for j, h2 in enumerate(h2_grid):
            G = np.exp(-(dZ / (2.0 * h2)) ** 2)
            quad = np.einsum("ij,ij->i", A @ G, A) * _INV_SQRT_4PI / S**2
            lin = np.einsum("ij,ij->i", A, np.exp(-0.5 * (Zr / h2) ** 2)) * _INV_SQRT_2PI / S
            out[i, j] = np.sum(quad - 2.0 * lin) / (n * h2)
    if not np.isfinite(out).any():
        raise DegenerateWeights("every in-window observation has zero leave-one-out weight")
    return out, skipped


def cv_onestep(data: Dataset, h1: float, h2: float, K1: KernelSpec, window: WeightWindow) -> float:
    """Leave-one-out CV criterion of the one-step estimator (Gaussian ``K2``).

    In-window terms whose leave-one-out weight sum vanishes are skipped;
    :class:`DegenerateWeights` is raised only when nothing remains.
    """
    out, _ = _cv_matrix(data.W, data.Y, [h1], [h2], K1, window)
    return float(out[0, 0])


def cv_twostep(data: Dataset, residuals, h1: float, h2: float, K1: KernelSpec,
               window: WeightWindow) -> float:
    """CV criterion of the two-step estimator: :func:`cv_onestep` on residuals."""
    out, _ = _cv_matrix(data.W, residuals, [h1], [h2], K1, window)
    return float(out[0, 0])


def cv_surface(data: Dataset, estimator: str, h1_grid, h2_grid, K1: KernelSpec,
               window: WeightWindow, residuals=None) -> CvSurface:
    """Evaluate the one- or two-step CV criterion on a bandwidth grid."""
    h1_grid = np.asarray(h1_grid, dtype=float).ravel()
    h2_grid = np.asarray(h2_grid, dtype=float).ravel()
    if h1_grid.size == 0 or h2_grid.size == 0:
        raise ValueError("bandwidth grids must be nonempty")
    if estimator == "onestep":
        Z = data.Y
    elif estimator == "twostep":
        if residuals is None:
            raise ValueError("two-step CV needs residuals")
        Z = residuals
    else:
        raise ValueError(f"estimator must be 'onestep' or 'twostep', got {estimator!r}")
    crit, skipped = _cv_matrix(data.W, Z, h1_grid, h2_grid, K1, window)
    return CvSurface(h1_grid, h2_grid, crit, skipped)


def _ref(sd, const, n):
    return const * sd * n ** (-0.2)


def default_grids(data: Dataset, estimator_id: str):
    """Default search grids for each estimator's naive CV step.

    ``h1`` follows the reference rule of the estimator's ``K1``; one-step
    estimators scan ``0.2..1.5`` times it and two-step estimators ``0.5..3``.
    ``h2`` scans ``0.2..1.5`` times the Gaussian reference rule for ``Y``,
    since CV always runs with a Gaussian ``K2``.
    """
    n = data.n
    sw, sy = float(np.std(data.W, ddof=1)), float(np.std(data.Y, ddof=1))
    const1 = {P1: GAUSSIAN, P2: GAUSSIAN, P3: SECOND_ORDER, P4: SECOND_ORDER}[estimator_id].reference_constant
    span1 = (0.2, 1.5) if estimator_id in (P1, P3) else (0.5, 3.0)
    h1 = _ref(sw, const1, n) * np.linspace(*span1, 10)
    h2 = _ref(sy, GAUSSIAN.reference_constant, n) * np.linspace(0.2, 1.5, 10)
    return h1, h2


def select_naive_bandwidths(data: Dataset, estimator: str, h1_grid, h2_grid,
                            window: Optional[WeightWindow] = None, K1: KernelSpec = GAUSSIAN,
                            mean_fit: Optional[MeanFit] = None) -> BandwidthSet:
    """Grid-minimise the naive CV criterion.

    For ``estimator == "twostep"`` a local linear mean with rule-of-thumb
    ``h3`` is fitted unless ``mean_fit`` is given; its ``h3`` is carried along.
    """
    if window is None:
        window = weight_window(data.W)
    residuals, h3 = None, None
    if estimator == "twostep":
        if mean_fit is None:
            mean_fit = fit_mean(data.W, data.Y)
        residuals, h3 = mean_fit.residuals, mean_fit.bandwidth_h3
    surf = cv_surface(data, estimator, h1_grid, h2_grid, K1, window, residuals)
    h1, h2 = surf.argmin
    return BandwidthSet(h1, h2, h3, "naive_cv")


def reliability_estimate(W, sigma_u: float) -> float:
    """``clamp(1 - sigma_u**2 / s_w**2, 0, 1)`` with the sample variance ``s_w**2``."""
    W = np.asarray(W, dtype=float).ravel()
    if W.size < 2:
        raise ZeroVariance("reliability needs at least two observations")
    s2 = float(np.var(W, ddof=1))
    if not s2 > 0:
        raise ZeroVariance("W has zero sample variance")
    return float(min(max(1.0 - sigma_u**2 / s2, 0.0), 1.0))


def _abs_corr(a, b):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    sa, sb = np.std(a), np.std(b)
    if not (sa > 0 and sb > 0):
        raise ZeroVariance("correlation undefined for a constant sample")
    r = np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb)
    return float(min(abs(r), 1.0))


def _inflate(h1, W, other, sigma_u):
    lam = reliability_estimate(W, sigma_u)
    return (1.0 + _abs_corr(W, other) * math.sqrt(1.0 - lam)) * h1


def adjust_onestep(h_nv: BandwidthSet, W, Y, sigma_u: float) -> BandwidthSet:
    """Inflate the naive ``h1`` by ``1 + |rho_wy| sqrt(1 - lambda_hat)``; ``h2`` is kept."""
    return h_nv.replace(h1=_inflate(h_nv.h1, W, Y, sigma_u), provenance="adjusted")


def adjust_twostep(h_nv_star: BandwidthSet, W, residuals, sigma_u: float) -> BandwidthSet:
    """Rescale the Gaussian-CV ``h2`` by :data:`C_FACTOR` and inflate ``h1`` by
    ``1 + |rho_we| sqrt(1 - lambda_hat)``."""
    return h_nv_star.replace(h1=_inflate(h_nv_star.h1, W, residuals, sigma_u),
                             h2=C_FACTOR * h_nv_star.h2, provenance="adjusted")


def select_bandwidths(data: Dataset, estimator_id: str, sigma_u: float = 0.0,
                      mean_fit: Optional[MeanFit] = None, window: Optional[WeightWindow] = None,
                      h1_grid=None, h2_grid=None, K1: Optional[KernelSpec] = None):
    """Full data-driven pipeline for one estimator.

    Returns ``(naive, final)`` bandwidth sets. For ``p1``/``p2`` the two are
    the same; ``p3``/``p4`` apply the measurement-error adjustments.
    """
    from .estimators import default_kernels

    if K1 is None:
        K1 = default_kernels(estimator_id)[0]
    g1, g2 = default_grids(data, estimator_id)
    h1_grid = g1 if h1_grid is None else h1_grid
    h2_grid = g2 if h2_grid is None else h2_grid
    twostep = estimator_id in (P2, P4)
    if twostep and mean_fit is None:
        mean_fit = fit_mean(data.W, data.Y)
    naive = select_naive_bandwidths(data, "twostep" if twostep else "onestep", h1_grid, h2_grid,
                                    window, K1, mean_fit)
    if estimator_id == P1 or estimator_id == P2:
        return naive, naive
    if estimator_id == P3:
        return naive, adjust_onestep(naive, data.W, data.Y, sigma_u)
    return naive, adjust_twostep(naive, data.W, mean_fit.residuals, sigma_u)
