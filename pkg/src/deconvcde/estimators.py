"""Conditional density estimators on an ``x`` by ``y`` grid.

Four estimators are provided:

* ``p1_naive``: kernel ratio in ``W`` and ``Y``, ignoring measurement error.
* ``p2_naive``: residual density shifted by a fitted mean, ignoring error.
* ``p3_deconv``: the ratio with the ``W`` kernel replaced by the
  deconvoluting kernel.
* ``p4_deconv``: the Fourier-deconvolved joint numerator of ``p2_naive``
  divided by the deconvolution estimate of ``f_X``.

The two-step numerators are computed in the frequency domain of ``y``:
``K2(u / h2) / h2`` is written as a cosine integral of ``phi_K2(h2 nu)`` and
discretised with Gauss-Legendre panels, so the ``W`` kernel sums are formed
once and shared by every ``h2``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .data import Dataset
from .errors import EmptySample, GridMismatch, GridTooCoarse, MalformedCsv, UnsupportedKernel
from .kernels import (
    ErrorKind,
    ErrorModel,
    GAUSSIAN,
    KernelSpec,
    NO_ERROR,
    SECOND_ORDER,
    deconv_kernel_eval,
    error_cf,
    kernel_cf,
    kernel_eval,
)
from .regression import MeanFit

__all__ = [
    "BandwidthSet",
    "DensityGrid",
    "P1",
    "P2",
    "P3",
    "P4",
    "ESTIMATORS",
    "default_kernels",
    "estimate_naive_onestep",
    "estimate_naive_twostep",
    "deconv_marginal_fx",
    "estimate_deconv_onestep",
    "integral_transform_Tx",
    "estimate_deconv_twostep",
    "deconv_wgrid",
]

P1, P2, P3, P4 = "p1_naive", "p2_naive", "p3_deconv", "p4_deconv"
ESTIMATORS = (P1, P2, P3, P4)
PROVENANCES = ("naive_cv", "adjusted", "oracle", "user")

# Columns whose marginal estimate falls below this are reported as NaN.
DENOM_FLOOR = 1e-10
# Internal w-grid for the Fourier transform: node count, margin beyond the
# data and raised-cosine taper width, both in units of h1. Gaussian error
# amplifies the truncated kernel tail exponentially, so it gets a wider window
# at the same resolution.
WGRID_NODES = 512
WGRID_MARGIN = 10.0
WGRID_TAPER = 5.0
_WGRID_GAUSS_SCALE = 2
MIN_WGRID_NODES = 64
# 1/phi_U is not applied where a Gaussian error cf drops below this.
GAUSS_CF_FLOOR = 1e-8
# exp(-s^2/2) < 1e-16 beyond this, so the Gaussian cf is truncated there.
_GAUSS_CF_REACH = 8.6


def default_kernels(estimator_id: str):
    """The ``(K1, K2)`` pair each estimator uses unless told otherwise."""
    return {
        P1: (GAUSSIAN, GAUSSIAN),
        P2: (GAUSSIAN, GAUSSIAN),
        P3: (SECOND_ORDER, GAUSSIAN),
        P4: (SECOND_ORDER, SECOND_ORDER),
    }[estimator_id]


@dataclass(frozen=True)
class BandwidthSet:
    """Smoothing parameters for ``W`` (h1), ``Y`` (h2) and the mean fit (h3)."""

    h1: float
    h2: float
    h3: Optional[float] = None
    provenance: str = "user"

    def __post_init__(self):
        for name in ("h1", "h2", "h3"):
            v = getattr(self, name)
            if v is None:
                continue
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and positive, got {v}")
            object.__setattr__(self, name, float(v))
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def replace(self, **kw) -> "BandwidthSet":
        d = dict(h1=self.h1, h2=self.h2, h3=self.h3, provenance=self.provenance)
        d.update(kw)
        return BandwidthSet(**d)


def _check_uniform(g, name):
    g = np.asarray(g, dtype=float).ravel()
    if g.size == 0:
        raise GridMismatch(f"{name} is empty")
    if g.size > 1:
        d = np.diff(g)
        if not np.all(d > 0):
            raise GridMismatch(f"{name} must be strictly increasing")
        if np.max(np.abs(d - d.mean())) > 1e-9 * max(abs(d.mean()), np.max(np.abs(g))):
            raise GridMismatch(f"{name} must be equally spaced")
    return g


def _fmt(v):
    return "NA" if not np.isfinite(v) else repr(float(v))


@dataclass(frozen=True)
class DensityGrid:
    """Estimates of ``p(y | x)``; ``values[k, j]`` belongs to ``(xgrid[k], ygrid[j])``."""

    xgrid: np.ndarray
    ygrid: np.ndarray
    values: np.ndarray
    estimator_id: str
    bandwidths: Optional[BandwidthSet] = None
    nan_columns: int = 0

    def __post_init__(self):
        x = _check_uniform(self.xgrid, "xgrid")
        y = _check_uniform(self.ygrid, "ygrid")
        v = np.asarray(self.values, dtype=float)
        if v.shape != (x.size, y.size):
            raise GridMismatch(f"values have shape {v.shape}, expected {(x.size, y.size)}")
        object.__setattr__(self, "xgrid", x)
        object.__setattr__(self, "ygrid", y)
        object.__setattr__(self, "values", v)

    @property
    def dx(self) -> float:
        return float(self.xgrid[1] - self.xgrid[0]) if self.xgrid.size > 1 else 1.0

    @property
    def dy(self) -> float:
        return float(self.ygrid[1] - self.ygrid[0]) if self.ygrid.size > 1 else 1.0

    def to_csv(self, path=None) -> str:
        """Write ``x\\y`` header plus one row per x value; returns the text."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x\\y"] + [_fmt(y) for y in self.ygrid])
        for x, row in zip(self.xgrid, self.values):
            w.writerow([_fmt(x)] + [_fmt(v) for v in row])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path, estimator_id: str = "unknown") -> "DensityGrid":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][0] != "x\\y":
            raise MalformedCsv(f"{path}: first cell must be x\\y")
        try:
            y = np.array([float(c) for c in rows[0][1:]])
            x = np.array([float(r[0]) for r in rows[1:]])
            vals = np.array([[np.nan if c == "NA" else float(c) for c in r[1:]] for r in rows[1:]])
        except ValueError as exc:
            raise MalformedCsv(f"{path}: {exc}") from None
        return cls(x, y, vals, estimator_id)


# --------------------------------------------------------------------------
# shared pieces


def _wy(data: Dataset):
    if data.n == 0:
        raise EmptySample("estimator needs at least one observation")
    return data.W, data.Y


def _k1_matrix(K1: KernelSpec, e: ErrorModel, h1: float, W, rows):
    """``K1((W_j - r) / h1)`` (or its deconvoluting version) as ``len(rows) x n``."""
    t = (W[None, :] - np.asarray(rows, dtype=float)[:, None]) / h1
    if e.is_null:
        return kernel_eval(K1, t)
    if not K1.compact_cf:
        raise UnsupportedKernel(f"error correction needs a compact-cf K1, got {K1}")
    return deconv_kernel_eval(K1, e, h1, t)


def _guarded_ratio(num, fx):
    """Divide each row of ``num`` by ``fx``; near-zero rows become NaN."""
    bad = ~(np.abs(fx) >= DENOM_FLOOR)
    out = np.empty_like(num)
    ok = ~bad
    out[ok] = num[ok] / fx[ok, None]
    out[bad] = np.nan
    return out, int(bad.sum())


def _finish(values, nbad, xgrid, ygrid, estimator_id, bw, clamp):
    if clamp:
        values = np.where(np.isnan(values), values, np.maximum(values, 0.0))
    return DensityGrid(xgrid, ygrid, values, estimator_id, bw, nbad)


def _onestep_numerators(A, Y, h2s, K2, ygrid):
    """``A @ K2((Y - y) / h2) / h2`` for each ``h2``."""
    d = Y[:, None] - ygrid[None, :]
    return [A @ (kernel_eval(K2, d / h2) / h2) for h2 in h2s]


def _cf_reach(K2: KernelSpec) -> float:
    return 1.0 if K2.compact_cf else _GAUSS_CF_REACH


def _gl_panels(breaks, zmax):
    """Gauss-Legendre nodes on ``[0, b1], [b1, b2], ...`` sized to resolve
    ``cos(nu z)`` with ``|z| <= zmax``."""
    nodes, weights = [], []
    lo = 0.0
    for hi in breaks:
        if hi <= lo:
            continue
        m = int(math.ceil(0.55 * zmax * (hi - lo))) + 32
        x, w = np.polynomial.legendre.leggauss(m)
        nodes.append(0.5 * (hi - lo) * x + 0.5 * (hi + lo))
        weights.append(0.5 * (hi - lo) * w)
        lo = hi
    return np.concatenate(nodes), np.concatenate(weights)


class _TwoStepFreq:
    """Frequency-domain representation of the two-step joint numerator.

    For row positions ``r`` with ``W`` weights ``A[r, j]`` and mean shifts
    ``m(r)``, the numerator ``sum_j A[r, j] K2((e_j + m(r) - y) / h2) / h2``
    equals ``(1/pi) Re sum_q w_q phi2(h2 nu_q) G[r, q] exp(-i nu_q y)`` with
    ``G = (A @ exp(i e nu)) * exp(i m(r) nu)``.
    """

    def __init__(self, A, e, shift, h2s, K2, ygrid):
        self.K2 = K2
        self.ygrid = ygrid
        reach = _cf_reach(K2)
        breaks = sorted({reach / h for h in h2s})
        zlo = e.min() + np.min(shift) - ygrid.max()
        zhi = e.max() + np.max(shift) - ygrid.min()
        zmax = max(abs(zlo), abs(zhi), 1e-3)
        self.nu, self.w = _gl_panels(breaks, zmax)
        phase = np.multiply.outer(e, self.nu)
        Fc = A @ np.cos(phase)
        Fs = A @ np.sin(phase)
        ms = np.multiply.outer(shift, self.nu)
        cm, sm = np.cos(ms), np.sin(ms)
        self.Gr = Fc * cm - Fs * sm
        self.Gi = Fc * sm + Fs * cm

    def left_multiply(self, D):
        """Apply a real linear map ``D`` along the row axis."""
        self.Gr = D @ self.Gr
        self.Gi = D @ self.Gi

    def numerator(self, h2):
        c = self.w * kernel_cf(self.K2, h2 * self.nu) / math.pi
        ny = np.multiply.outer(self.nu, self.ygrid)
        return (self.Gr * c) @ np.cos(ny) + (self.Gi * c) @ np.sin(ny)


def _as_array(x, name):
    a = np.asarray(x, dtype=float).ravel()
    if a.size == 0:
        raise GridMismatch(f"{name} is empty")
    return a


# --------------------------------------------------------------------------
# naive estimators


def estimate_naive_onestep(data: Dataset, bw: BandwidthSet, K1: KernelSpec, K2: KernelSpec,
                           xgrid, ygrid, clamp: bool = False) -> DensityGrid:
    """Kernel ratio estimate treating ``W`` as the true covariate."""
    return _onestep(data, bw, K1, K2, NO_ERROR, xgrid, ygrid, P1, clamp)


def _onestep(data, bw, K1, K2, e, xgrid, ygrid, estimator_id, clamp):
    W, Y = _wy(data)
    xgrid, ygrid = _as_array(xgrid, "xgrid"), _as_array(ygrid, "ygrid")
    A = _k1_matrix(K1, e, bw.h1, W, xgrid)
    (num,) = _onestep_numerators(A, Y, [bw.h2], K2, ygrid)
    fx = A.sum(axis=1) / (W.size * bw.h1)
    vals, nbad = _guarded_ratio(num / (W.size * bw.h1), fx)
    return _finish(vals, nbad, xgrid, ygrid, estimator_id, bw, clamp)


def _twostep_naive_values(W, e, mean_fit, h1, h2s, K1, K2, xgrid, ygrid):
    A = kernel_eval(K1, (W[None, :] - xgrid[:, None]) / h1)
    fx = A.sum(axis=1) / (W.size * h1)
    freq = _TwoStepFreq(A, e, mean_fit(xgrid), h2s, K2, ygrid)
    return fx, [freq.numerator(h2) / (W.size * h1) for h2 in h2s]


def estimate_naive_twostep(data: Dataset, bw: BandwidthSet, mean_fit: MeanFit, K1: KernelSpec,
                           K2: KernelSpec, xgrid, ygrid, clamp: bool = False) -> DensityGrid:
    """Residual kernel density shifted by ``m*(x)``, treating ``W`` as exact."""
    W, Y = _wy(data)
    xgrid, ygrid = _as_array(xgrid, "xgrid"), _as_array(ygrid, "ygrid")
    e = _residuals(mean_fit, W, Y)
    fx, (num,) = _twostep_naive_values(W, e, mean_fit, bw.h1, [bw.h2], K1, K2, xgrid, ygrid)
    vals, nbad = _guarded_ratio(num, fx)
    return _finish(vals, nbad, xgrid, ygrid, P2, bw, clamp)


def _residuals(mean_fit, W, Y):
    e = np.asarray(mean_fit.residuals, dtype=float)
    if e.size != W.size:
        raise ValueError("mean_fit residuals do not match the data size")
    return e


# --------------------------------------------------------------------------
# deconvolution estimators


def deconv_marginal_fx(W, h1: float, K1: KernelSpec, e: ErrorModel, xgrid):
    """Deconvolution kernel estimate of the density of the true covariate."""
    W = np.asarray(W, dtype=float).ravel()
    if W.size == 0:
        raise EmptySample("deconv_marginal_fx needs at least one observation")
    xgrid = _as_array(xgrid, "xgrid")
    return _k1_matrix(K1, e, h1, W, xgrid).sum(axis=1) / (W.size * h1)


def estimate_deconv_onestep(data: Dataset, bw: BandwidthSet, K1: KernelSpec, K2: KernelSpec,
                            e: ErrorModel, xgrid, ygrid, clamp: bool = False) -> DensityGrid:
    """One-step estimate with the deconvoluting kernel in numerator and denominator."""
    if not K1.compact_cf:
        raise UnsupportedKernel(f"p3 needs a compact-cf K1, got {K1}")
    return _onestep(data, bw, K1, K2, e, xgrid, ygrid, P3, clamp)


def deconv_wgrid(W, h1: float, e: ErrorModel = NO_ERROR):
    """Uniform grid and taper width used to deconvolve two-step numerators."""
    W = np.asarray(W, dtype=float)
    k = _WGRID_GAUSS_SCALE if e.kind is ErrorKind.GAUSSIAN else 1
    margin = k * WGRID_MARGIN * h1
    grid = np.linspace(W.min() - margin, W.max() + margin, k * WGRID_NODES)
    return grid, k * WGRID_TAPER * h1


def _taper(wgrid, width):
    if width <= 0:
        return np.ones_like(wgrid)
    d = np.minimum(wgrid - wgrid[0], wgrid[-1] - wgrid)
    return np.where(d >= width, 1.0, 0.5 * (1.0 - np.cos(np.pi * np.clip(d, 0, width) / width)))


def _tx_matrix(wgrid, xgrid, e: ErrorModel, taper: float, t_max: Optional[float]):
    """Complex matrix ``M`` with ``Tx{g}(x) = (M @ g)(x)`` for ``g`` on ``wgrid``.

    Forward trapezoid transform on ``wgrid``, division by ``phi_U`` on the
    DFT-conjugate frequency grid, trapezoid inverse at ``xgrid``.
    """
    nw = wgrid.size
    dw = (wgrid[-1] - wgrid[0]) / (nw - 1)
    half = nw // 2
    dt = 2.0 * np.pi / (nw * dw)
    t = dt * np.arange(-half, half + 1)
    wt = np.full(t.size, dt)
    wt[0] = wt[-1] = 0.5 * dt
    if e.kind is ErrorKind.GAUSSIAN and e.sigma_u > 0:
        t_cut = math.sqrt(-2.0 * math.log(GAUSS_CF_FLOOR)) / e.sigma_u
        t_max = t_cut if t_max is None else min(t_max, t_cut)
    keep = np.ones(t.size, bool) if t_max is None else np.abs(t) <= t_max
    t, wt = t[keep], wt[keep]
    v = wt / error_cf(e, t) / (2.0 * np.pi)
    ww = np.full(nw, dw)
    ww[0] = ww[-1] = 0.5 * dw
    ww = ww * _taper(wgrid, taper)
    fwd = np.exp(1j * np.multiply.outer(t, wgrid)) * ww[None, :]
    inv = np.exp(-1j * np.multiply.outer(xgrid, t)) * v[None, :]
    return inv @ fwd


def integral_transform_Tx(g: Union[Callable, np.ndarray], e: ErrorModel, wgrid, xgrid, ygrid,
                          taper: float = 0.0, t_max: Optional[float] = None,
                          transform_null: bool = False, return_imag: bool = False):
    """Deconvolve ``g(w, y)`` along ``w`` and evaluate the result at ``xgrid``.

    Parameters
    ----------
    g : callable ``g(w, y)`` broadcasting over arrays, or an array of shape
        ``(len(wgrid), len(ygrid))``.
    e : measurement error model.
    wgrid : uniform grid with at least 64 nodes.
    taper : width of a raised-cosine taper applied at both ends of ``wgrid``
        to suppress the truncation edge. Zero disables it.
    t_max : optional frequency cutoff. Gaussian error is always cut where
        ``phi_U`` drops below 1e-8.
    transform_null : with no error, ``g`` is returned at ``xgrid`` directly
        unless this is set, in which case the Fourier round trip is run.
    return_imag : also return the discarded imaginary part.

    Returns
    -------
    ndarray of shape ``(len(xgrid), len(ygrid))``; real part of the transform.
    """
    wgrid = _check_uniform(wgrid, "wgrid")
    if wgrid.size < MIN_WGRID_NODES:
        raise GridTooCoarse(f"wgrid has {wgrid.size} nodes, need at least {MIN_WGRID_NODES}")
    xgrid, ygrid = _as_array(xgrid, "xgrid"), _as_array(ygrid, "ygrid")
    if e.is_null and not transform_null:
        if callable(g):
            out = np.asarray(g(xgrid[:, None], ygrid[None, :]), dtype=float)
            out = np.broadcast_to(out, (xgrid.size, ygrid.size)).copy()
        else:
            G = np.asarray(g, dtype=float)
            out = np.column_stack([np.interp(xgrid, wgrid, G[:, j]) for j in range(G.shape[1])])
        return (out, np.zeros_like(out)) if return_imag else out
    if callable(g):
        G = np.asarray(g(wgrid[:, None], ygrid[None, :]), dtype=float)
        G = np.broadcast_to(G, (wgrid.size, ygrid.size))
    else:
        G = np.asarray(g, dtype=float)
    if G.shape != (wgrid.size, ygrid.size):
        raise GridMismatch(f"g has shape {G.shape}, expected {(wgrid.size, ygrid.size)}")
    M = _tx_matrix(wgrid, xgrid, e, taper, t_max)
    out = M @ G
    return (out.real, out.imag) if return_imag else out.real


def _twostep_deconv_values(W, e_res, mean_fit, h1, h2s, K1, K2, err, xgrid, ygrid):
    """Returns ``f_X`` at ``xgrid`` and the deconvolved numerator for each ``h2``."""
    n = W.size
    fx = deconv_marginal_fx(W, h1, K1, err, xgrid)
    if err.is_null:
        # identity transform: the numerator rows are evaluated at xgrid directly
        A = kernel_eval(K1, (W[None, :] - xgrid[:, None]) / h1)
        freq = _TwoStepFreq(A, e_res, mean_fit(xgrid), h2s, K2, ygrid)
    else:
        wgrid, taper = deconv_wgrid(W, h1, err)
        A = kernel_eval(K1, (W[None, :] - wgrid[:, None]) / h1)
        shift = mean_fit(wgrid)
        freq = _TwoStepFreq(A, e_res, shift, h2s, K2, ygrid)
        # Under Gaussian error the transform is limited to the support of phi_K1(h1 t).
        # Content that K2(m(w) - y) adds beyond 1/h1 would be amplified by up to 1/GAUSS_CF_FLOOR.
        band = 1.0 / h1 if err.kind is ErrorKind.GAUSSIAN else None
        M = _tx_matrix(wgrid, xgrid, err, taper, band)
        freq.left_multiply(M.real)
    return fx, [freq.numerator(h2) / (n * h1) for h2 in h2s]


def estimate_deconv_twostep(data: Dataset, bw: BandwidthSet, mean_fit: MeanFit, K1: KernelSpec,
                            K2: KernelSpec, e: ErrorModel, xgrid, ygrid,
                            clamp: bool = False) -> DensityGrid:
    """Two-step estimate: deconvolved joint numerator over the deconvolved ``f_X``."""
    if not K1.compact_cf:
        raise UnsupportedKernel(f"p4 needs a compact-cf K1, got {K1}")
    W, Y = _wy(data)
    xgrid, ygrid = _as_array(xgrid, "xgrid"), _as_array(ygrid, "ygrid")
    e_res = _residuals(mean_fit, W, Y)
    fx, (num,) = _twostep_deconv_values(W, e_res, mean_fit, bw.h1, [bw.h2], K1, K2, e, xgrid, ygrid)
    vals, nbad = _guarded_ratio(num, fx)
    return _finish(vals, nbad, xgrid, ygrid, P4, bw, clamp)
