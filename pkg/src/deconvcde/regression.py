"""Estimators of the naive mean ``m*(x) = E(Y | W = x)``.

Two smoothers are available: a local linear fit with a Gaussian kernel and a
least-squares cubic B-spline. Both are wrapped by :class:`MeanFit`, which
clamps evaluation points to the observed covariate range.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import BSpline

from .errors import DegenerateDesign, EmptySample, InsufficientData

__all__ = [
    "MeanFit",
    "local_linear_fit",
    "rot_bandwidth",
    "cubic_spline_fit",
    "fit_mean",
]

LOCAL_LINEAR = "local-linear"
CUBIC_SPLINE = "spline"

# Fan & Gijbels constant C_{0,1}(K) for the Gaussian kernel: (1 / (2 sqrt(pi)))^(1/5)
_ROT_CONSTANT = (1.0 / (2.0 * math.sqrt(math.pi))) ** 0.2


def local_linear_fit(W, Y, h3, eval_points):
    """Local linear regression of ``Y`` on ``W`` with a Gaussian kernel.

    Parameters
    ----------
    W, Y : array_like, shape (n,)
        Data.
    h3 : float
        Bandwidth.
    eval_points : array_like, shape (m,)
        Points at which the intercept of the local line is returned.

    Returns
    -------
    ndarray, shape (m,)

    Notes
    -----
    Weights are rescaled by their maximum before solving, so underflow far
    from the data cannot occur. When the local 2x2 system is singular (for
    instance ``n == 1``) the locally weighted mean is returned instead.
    """
    W = np.asarray(W, dtype=float).ravel()
    Y = np.asarray(Y, dtype=float).ravel()
    x = np.asarray(eval_points, dtype=float)
    shape = x.shape
    x = x.ravel()
    if W.size == 0:
        raise EmptySample("local_linear_fit needs at least one observation")
    if W.size != Y.size:
        raise ValueError("W and Y must have the same length")
    if not h3 > 0:
        raise ValueError(f"h3 must be positive, got {h3}")

    d = W[None, :] - x[:, None]
    logw = -0.5 * (d / h3) ** 2
    w = np.exp(logw - logw.max(axis=1, keepdims=True))
    s0 = w.sum(axis=1)
    mean = (w @ Y) / s0
    # centred form: exact for lines even when one point carries almost all weight
    dbar = (w * d).sum(axis=1) / s0
    dc = d - dbar[:, None]
    s2c = (w * dc * dc).sum(axis=1)
    ok = (s0 >= 1e-12) & (s2c > 0)
    out = mean.copy()
    slope = (w * dc * (Y[None, :] - mean[:, None])).sum(axis=1)[ok] / s2c[ok]
    out[ok] = mean[ok] - slope * dbar[ok]
    return out.reshape(shape)


def _window(W):
    lo, hi = np.percentile(W, [2.5, 97.5])
    return lo, hi


def rot_bandwidth(W, Y):
    """Rule-of-thumb plug-in bandwidth for Gaussian local linear regression.

    A global quartic is fitted to the data; its residual variance and squared
    second derivative over the central 95% of ``W`` enter the asymptotically
    optimal ``n**(-1/5)`` formula of Fan and Gijbels. The result is capped at
    ``max(W) - min(W)``.
    """
    W = np.asarray(W, dtype=float).ravel()
    Y = np.asarray(Y, dtype=float).ravel()
    n = W.size
    if n < 10:
        raise InsufficientData(f"rot_bandwidth needs n >= 10, got {n}")
    span = float(W.max() - W.min())
    if span <= 0:
        raise DegenerateDesign("W has zero range")
    centre, scale = W.mean(), W.std()
    z = (W - centre) / scale
    X = np.vander(z, 5, increasing=True)
    coef, _, rank, _ = np.linalg.lstsq(X, Y, rcond=None)
    if rank < 5:
        raise DegenerateDesign("quartic design matrix is rank deficient")
    resid = Y - X @ coef
    sigma2 = float(resid @ resid) / (n - 5)
    # second derivative in original units
    m2 = (2 * coef[2] + 6 * coef[3] * z + 12 * coef[4] * z * z) / scale**2
    lo, hi = _window(W)
    inside = (W >= lo) & (W <= hi)
    denom = float(np.sum(m2[inside] ** 2))
    # curvature at round-off level counts as none
    if not denom > 0 or np.max(np.abs(coef[2:])) <= 1e-10 * np.max(np.abs(coef)):
        return span
    h = _ROT_CONSTANT * (sigma2 * (hi - lo) / denom) ** 0.2
    return float(min(h, span))


def _spline_basis(W, df):
    lo, hi = float(W.min()), float(W.max())
    n_inner = df - 3
    if n_inner > 0:
        inner = np.quantile(W, np.arange(1, n_inner + 1) / (n_inner + 1))
    else:
        inner = np.empty(0)
    knots = np.concatenate([[lo] * 4, inner, [hi] * 4])
    return knots


def _spline_design(knots, x):
    x = np.clip(x, knots[0], knots[-1])
    return BSpline.design_matrix(x, knots, 3).toarray()


def cubic_spline_fit(W, Y, df, eval_points):
    """Least-squares cubic B-spline regression.

    ``df`` counts basis functions besides the intercept (the convention of
    R's ``bs``), so the fit has ``df + 1`` coefficients and ``df - 3`` interior
    knots at equally spaced quantiles of ``W``.
    """
    coef, knots = _spline_coef(W, Y, df)
    x = np.asarray(eval_points, dtype=float)
    return (_spline_design(knots, x.ravel()) @ coef).reshape(x.shape)


def _spline_coef(W, Y, df):
    W = np.asarray(W, dtype=float).ravel()
    Y = np.asarray(Y, dtype=float).ravel()
    if df < 3:
        raise ValueError(f"spline df must be >= 3, got {df}")
    if W.size <= df:
        raise InsufficientData(f"cubic spline with df={df} needs n > df, got n={W.size}")
    knots = _spline_basis(W, df)
    B = _spline_design(knots, W)
    coef, *_ = np.linalg.lstsq(B, Y, rcond=None)
    return coef, knots


@dataclass(frozen=True)
class MeanFit:
    """A fitted estimate of ``m*``.

    Calling the object evaluates the fit; points outside ``[w_min, w_max]``
    take the boundary value.
    """

    method: str
    w_min: float
    w_max: float
    evaluator: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    residuals: np.ndarray = field(repr=False)
    bandwidth_h3: Optional[float] = None
    spline_df: Optional[int] = None

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self.evaluator(np.clip(x, self.w_min, self.w_max))

    @classmethod
    def zero(cls, W, Y) -> "MeanFit":
        """The trivial fit ``m* = 0``; residuals equal ``Y``."""
        W = np.asarray(W, dtype=float)
        Y = np.asarray(Y, dtype=float)
        return cls("zero", float(W.min()), float(W.max()), np.zeros_like, Y.copy())


def fit_mean(W, Y, method: str = LOCAL_LINEAR, h3: Optional[float] = None, df: int = 5) -> MeanFit:
    """Fit ``m*`` and return a :class:`MeanFit` with residuals at the data."""
    W = np.asarray(W, dtype=float).ravel()
    Y = np.asarray(Y, dtype=float).ravel()
    if W.size == 0:
        raise EmptySample("cannot fit a mean to an empty sample")
    lo, hi = float(W.min()), float(W.max())
    if method in (LOCAL_LINEAR, "kernel", "local_linear"):
        if h3 is None:
            h3 = rot_bandwidth(W, Y)

        def ev(x, W=W, Y=Y, h3=h3):
            return local_linear_fit(W, Y, h3, x)

        fit = MeanFit(LOCAL_LINEAR, lo, hi, ev, np.empty(0), bandwidth_h3=float(h3))
    elif method in (CUBIC_SPLINE, "cubic-spline", "cubic_spline"):
        coef, knots = _spline_coef(W, Y, df)

        def ev(x, coef=coef, knots=knots):
            x = np.asarray(x, dtype=float)
            return (_spline_design(knots, x.ravel()) @ coef).reshape(x.shape)

        fit = MeanFit(CUBIC_SPLINE, lo, hi, ev, np.empty(0), spline_df=int(df))
    else:
        raise ValueError(f"unknown mean method {method!r}")
    resid = Y - fit(W)
    object.__setattr__(fit, "residuals", resid)
    return fit
