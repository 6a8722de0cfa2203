"""Smoothing kernels, measurement-error characteristic functions and the
deconvoluting kernel.

All kernels are real and even. The three compactly supported kernels have
characteristic functions of the form ``(1 - s**2)**p`` on ``[-1, 1]``:

============  ===  ==========================================
kind          p    kernel
============  ===  ==========================================
sinc          0    ``sin(t) / (pi t)``
second_order  3    the kernel with cf ``(1 - s**2)**3``
poly8         8    the kernel with cf ``(1 - s**2)**8``
============  ===  ==========================================

Every function here is vectorised over its real argument and returns an
``ndarray`` (or a float for scalar input).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial import polynomial as P

from .errors import UnsupportedKernel

__all__ = [
    "KernelKind",
    "KernelSpec",
    "ErrorKind",
    "ErrorModel",
    "GAUSSIAN",
    "SECOND_ORDER",
    "SINC",
    "POLY8",
    "kernel_eval",
    "kernel_cf",
    "kernel_second_derivative",
    "kernel_mu2",
    "error_cf",
    "deconv_kernel_eval",
]

_SQRT_2PI = math.sqrt(2.0 * math.pi)

# |t| below this uses the power series for the compact-cf kernels; the
# closed forms lose about 2 digits per halving of |t| near the origin.
_SERIES_CUTOFF = 2.0
_SERIES_TERMS = 16
# Above this |t| the fixed Gauss-Legendre rule stops resolving cos(ts).
_QUAD_CUTOFF = 200.0
_GL_NODES = 256
_GAUSS_ERROR_NODES = 200


class KernelKind(str, enum.Enum):
    GAUSSIAN = "gaussian"
    SECOND_ORDER = "second_order"
    SINC = "sinc"
    POLY8 = "poly8"


_ALIASES = {
    "gauss": KernelKind.GAUSSIAN,
    "gaussian": KernelKind.GAUSSIAN,
    "normal": KernelKind.GAUSSIAN,
    "secorder": KernelKind.SECOND_ORDER,
    "second_order": KernelKind.SECOND_ORDER,
    "second-order": KernelKind.SECOND_ORDER,
    "sinc": KernelKind.SINC,
    "poly8": KernelKind.POLY8,
}

_CF_POWER = {KernelKind.SINC: 0, KernelKind.SECOND_ORDER: 3, KernelKind.POLY8: 8}


@dataclass(frozen=True)
class KernelSpec:
    """A smoothing kernel.

    Parameters
    ----------
    kind : KernelKind
        Which kernel.
    """

    kind: KernelKind

    @classmethod
    def from_name(cls, name: str) -> "KernelSpec":
        try:
            return cls(_ALIASES[name.strip().lower()])
        except KeyError:
            raise UnsupportedKernel(f"unknown kernel {name!r}") from None

    @property
    def compact_cf(self) -> bool:
        """True when the characteristic function vanishes outside [-1, 1]."""
        return self.kind is not KernelKind.GAUSSIAN

    @property
    def cf_power(self) -> int:
        return _CF_POWER[self.kind]

    @property
    def reference_constant(self) -> float:
        """Constant of the normal-reference bandwidth rule ``c * sd * n**-0.2``."""
        if self.kind is KernelKind.GAUSSIAN:
            return 1.06
        if self.kind is KernelKind.SECOND_ORDER:
            return 0.427398
        if self.kind is KernelKind.SINC:
            # infinite second moment
            return float("nan")
        return _silverman_constant(self.cf_power)

    def __str__(self) -> str:
        return self.kind.value


GAUSSIAN = KernelSpec(KernelKind.GAUSSIAN)
SECOND_ORDER = KernelSpec(KernelKind.SECOND_ORDER)
SINC = KernelSpec(KernelKind.SINC)
POLY8 = KernelSpec(KernelKind.POLY8)


class ErrorKind(str, enum.Enum):
    NONE = "none"
    LAPLACE = "laplace"
    GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class ErrorModel:
    """Distribution of the additive measurement error ``U`` in ``W = X + U``.

    ``sigma_u`` is the standard deviation of ``U``; for Laplace error the
    scale parameter is ``sigma_u / sqrt(2)``.
    """

    kind: ErrorKind = ErrorKind.NONE
    sigma_u: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ErrorKind(self.kind))
        if not (self.sigma_u >= 0.0 and math.isfinite(self.sigma_u)):
            raise ValueError(f"sigma_u must be finite and >= 0, got {self.sigma_u}")

    @property
    def is_null(self) -> bool:
        """True when the model carries no error at all."""
        return self.kind is ErrorKind.NONE or self.sigma_u == 0.0

    @classmethod
    def laplace(cls, sigma_u: float) -> "ErrorModel":
        return cls(ErrorKind.LAPLACE, float(sigma_u))

    @classmethod
    def gaussian(cls, sigma_u: float) -> "ErrorModel":
        return cls(ErrorKind.GAUSSIAN, float(sigma_u))


NO_ERROR = ErrorModel()


def _as_float_array(t):
    arr = np.asarray(t, dtype=float)
    return arr, arr.ndim == 0


def _ret(out, scalar):
    return float(out) if scalar else out


# ---------------------------------------------------------------------------
# Generic machinery for kernels with cf (1 - s^2)^p on [-1, 1]
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _poly_coeffs(power: int, s_power: int) -> np.ndarray:
    """Coefficients (ascending) of s**s_power * (1 - s**2)**power."""
    base = np.array([1.0, 0.0, -1.0])
    c = P.polypow(base, power) if power else np.array([1.0])
    return P.polymulx(P.polymulx(c)) if s_power == 2 else c


@lru_cache(maxsize=None)
def _series_coeffs(power: int, s_power: int) -> np.ndarray:
    # (1/pi) int_0^1 q(s) cos(ts) ds = sum_k a_k t^(2k)
    q = _poly_coeffs(power, s_power)
    out = np.empty(_SERIES_TERMS)
    for k in range(_SERIES_TERMS):
        mom = sum(c / (2 * k + i + 1) for i, c in enumerate(q))
        out[k] = (-1) ** k * mom / math.factorial(2 * k) / math.pi
    return out


@lru_cache(maxsize=None)
def _gl01(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def _cos_transform(power: int, s_power: int, t: np.ndarray) -> np.ndarray:
    """(1/pi) * int_0^1 s**s_power (1-s**2)**power cos(t s) ds, elementwise."""
    a = np.abs(t)
    out = np.empty_like(a)
    small = a < _SERIES_CUTOFF
    large = a > _QUAD_CUTOFF
    mid = ~(small | large)
    if small.any():
        coef = _series_coeffs(power, s_power)
        out[small] = P.polyval(a[small] ** 2, coef)
    if mid.any():
        nodes, weights = _gl01(_GL_NODES)
        q = P.polyval(nodes, _poly_coeffs(power, s_power)) * weights
        tm = a[mid]
        out[mid] = np.cos(np.multiply.outer(tm, nodes)) @ q / math.pi
    if large.any():
        # repeated integration by parts: exact for polynomial q
        tl = a[large]
        q = _poly_coeffs(power, s_power)
        acc = np.zeros(tl.shape, dtype=complex)
        e1 = np.exp(1j * tl)
        d = q.copy()
        k = 0
        while d.size and np.any(d):
            v1 = P.polyval(1.0, d)
            v0 = P.polyval(0.0, d)
            acc += (-1) ** k * (v1 * e1 - v0) / (1j * tl) ** (k + 1)
            d = P.polyder(d)
            k += 1
        out[large] = acc.real / math.pi
    return out


def _second_order_closed(t: np.ndarray) -> np.ndarray:
    c, s = np.cos(t), np.sin(t)
    return 48.0 * c / (math.pi * t**4) * (1.0 - 15.0 / t**2) - 144.0 * s / (math.pi * t**5) * (
        2.0 - 5.0 / t**2
    )


def _second_order_dd_closed(t: np.ndarray) -> np.ndarray:
    c, s = np.cos(t), np.sin(t)
    t2 = t * t
    num = t * (-t2 * t2 * c + 95.0 * t2 * c - 840.0 * c) + (14.0 * t2 * t2 - 375.0 * t2 + 840.0) * s
    return 48.0 * num / (math.pi * t**9)


def _silverman_constant(power: int) -> float:
    # [8 sqrt(pi) R(K) / (3 mu2^2)]^(1/5) with R(K) = (1/pi) int_0^1 phi^2
    q = _poly_coeffs(2 * power, 0)
    rk = sum(c / (i + 1) for i, c in enumerate(q)) / math.pi
    mu2 = 2.0 * power
    return (8.0 * math.sqrt(math.pi) * rk / (3.0 * mu2**2)) ** 0.2


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def kernel_eval(k: KernelSpec, t):
    """Evaluate the kernel ``K(t)``."""
    t, scalar = _as_float_array(t)
    if k.kind is KernelKind.GAUSSIAN:
        out = np.exp(-0.5 * t * t) / _SQRT_2PI
    elif k.kind is KernelKind.SECOND_ORDER:
        a = np.abs(t)
        out = np.empty_like(a)
        small = a < _SERIES_CUTOFF
        out[small] = P.polyval(a[small] ** 2, _series_coeffs(3, 0))
        out[~small] = _second_order_closed(a[~small])
    elif k.kind is KernelKind.SINC:
        out = np.sinc(t / math.pi) / math.pi
    else:
        out = _cos_transform(k.cf_power, 0, t)
    return _ret(out, scalar)


def kernel_second_derivative(k: KernelSpec, t):
    """Evaluate ``K''(t)`` analytically."""
    t, scalar = _as_float_array(t)
    if k.kind is KernelKind.GAUSSIAN:
        out = (t * t - 1.0) * np.exp(-0.5 * t * t) / _SQRT_2PI
    elif k.kind is KernelKind.SECOND_ORDER:
        a = np.abs(t)
        out = np.empty_like(a)
        small = a < _SERIES_CUTOFF
        out[small] = -P.polyval(a[small] ** 2, _series_coeffs(3, 2))
        out[~small] = _second_order_dd_closed(a[~small])
    else:
        out = -_cos_transform(k.cf_power, 2, t)
    return _ret(out, scalar)


def kernel_cf(k: KernelSpec, s):
    """Characteristic function ``phi_K(s)``."""
    s, scalar = _as_float_array(s)
    if k.kind is KernelKind.GAUSSIAN:
        out = np.exp(-0.5 * s * s)
    else:
        inside = np.abs(s) <= 1.0
        out = np.where(inside, np.clip(1.0 - s * s, 0.0, None) ** k.cf_power, 0.0)
    return _ret(out, scalar)


def kernel_mu2(k: KernelSpec) -> float:
    """Second moment ``int t**2 K(t) dt`` (equals ``-phi_K''(0)``)."""
    if k.kind is KernelKind.GAUSSIAN:
        return 1.0
    if k.kind is KernelKind.SINC:
        return float("inf")
    return 2.0 * k.cf_power


def error_cf(e: ErrorModel, t):
    """Characteristic function ``phi_U(t)`` of the measurement error."""
    t, scalar = _as_float_array(t)
    s2 = e.sigma_u**2
    if e.kind is ErrorKind.NONE:
        out = np.ones_like(t)
    elif e.kind is ErrorKind.LAPLACE:
        out = 1.0 / (1.0 + 0.5 * s2 * t * t)
    else:
        out = np.exp(-0.5 * s2 * t * t)
    return _ret(out, scalar)


def deconv_kernel_eval(k: KernelSpec, e: ErrorModel, h1: float, t):
    """Deconvoluting kernel ``K*(t) = (1/2pi) int e^{-its} phi_K(s) / phi_U(-s/h1) ds``.

    Laplace error uses the exact identity ``K* = K - sigma_u**2 / (2 h1**2) K''``;
    Gaussian error integrates the cosine form with a fixed Gauss-Legendre rule.

    Raises
    ------
    UnsupportedKernel
        If ``k`` has no compactly supported characteristic function.
    """
    if not k.compact_cf:
        raise UnsupportedKernel(f"deconvoluting kernel needs a compact-cf kernel, got {k}")
    if not h1 > 0:
        raise ValueError(f"h1 must be positive, got {h1}")
    t, scalar = _as_float_array(t)
    if e.is_null:
        out = np.asarray(kernel_eval(k, t), dtype=float)
    elif e.kind is ErrorKind.LAPLACE:
        c = e.sigma_u**2 / (2.0 * h1 * h1)
        out = kernel_eval(k, t) - c * kernel_second_derivative(k, t)
    else:
        nodes, weights = _gl01(_GAUSS_ERROR_NODES)
        wts = (1.0 - nodes**2) ** k.cf_power * np.exp(0.5 * (e.sigma_u * nodes / h1) ** 2) * weights
        out = np.cos(np.multiply.outer(np.abs(t), nodes)) @ wts / math.pi
    return _ret(np.asarray(out, dtype=float), scalar)
