import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from deconvcde.errors import UnsupportedKernel
from deconvcde.kernels import (
    GAUSSIAN,
    NO_ERROR,
    POLY8,
    SECOND_ORDER,
    SINC,
    ErrorModel,
    KernelSpec,
    deconv_kernel_eval,
    error_cf,
    kernel_cf,
    kernel_eval,
    kernel_mu2,
    kernel_second_derivative,
)

ALL = [GAUSSIAN, SECOND_ORDER, SINC, POLY8]
COMPACT = [SECOND_ORDER, SINC, POLY8]


def cos_quad(f, t):
    """(1/pi) int_0^1 f(s) cos(t s) ds by QAWO."""
    if t == 0:
        return integrate.quad(f, 0, 1, epsabs=1e-14, epsrel=1e-13)[0] / math.pi
    return integrate.quad(f, 0, 1, weight="cos", wvar=t, epsabs=1e-14, epsrel=1e-13)[0] / math.pi


def test_kernel_values_at_zero():
    assert kernel_eval(GAUSSIAN, 0.0) == pytest.approx(1 / math.sqrt(2 * math.pi), abs=1e-15)
    assert kernel_eval(SECOND_ORDER, 0.0) == pytest.approx(16 / (35 * math.pi), abs=1e-14)
    assert kernel_eval(SINC, 0.0) == pytest.approx(1 / math.pi)


@pytest.mark.parametrize("k", COMPACT, ids=str)
@pytest.mark.parametrize("t", [0.0, 1e-6, 0.05, 0.1, 0.5, 1.0, 1.99, 2.0, 2.01, 3.7, 7.3, 25.0, 150.0, 210.0, 900.0])
def test_compact_kernels_match_cosine_quadrature(k, t):
    p = k.cf_power
    expect = cos_quad(lambda s: (1 - s * s) ** p, t)
    assert kernel_eval(k, t) == pytest.approx(expect, abs=1e-12)


@pytest.mark.parametrize("k", [SECOND_ORDER, POLY8, GAUSSIAN], ids=str)
@pytest.mark.parametrize("t", [0.0, 0.3, 1.9, 2.1, 5.0, 11.0])
def test_second_derivative_matches_central_difference(k, t):
    h = 1e-3
    fd = (kernel_eval(k, t + h) - 2 * kernel_eval(k, t) + kernel_eval(k, t - h)) / h**2
    assert kernel_second_derivative(k, t) == pytest.approx(fd, abs=1e-6)


def test_second_order_continuous_across_series_cutoff():
    t = np.array([2.0 - 1e-12, 2.0, 2.0 + 1e-12])
    v = kernel_eval(SECOND_ORDER, t)
    d = kernel_second_derivative(SECOND_ORDER, t)
    assert np.ptp(v) < 1e-13 and np.ptp(d) < 1e-13


@settings(max_examples=60, deadline=None)
@given(t=st.floats(-200, 200, allow_nan=False))
def test_kernels_even(t):
    for k in ALL:
        assert kernel_eval(k, t) == pytest.approx(kernel_eval(k, -t), abs=1e-15)
        assert kernel_cf(k, t) == kernel_cf(k, -t)


@settings(max_examples=40, deadline=None)
@given(s=st.floats(1.0000001, 50))
def test_compact_cf_vanishes_outside_unit_interval(s):
    for k in COMPACT:
        assert kernel_cf(k, s) == 0.0
    assert kernel_cf(GAUSSIAN, s) > 0 or s > 35


def test_cf_examples():
    assert kernel_cf(SECOND_ORDER, 0.0) == 1.0
    assert kernel_cf(SECOND_ORDER, 1.5) == 0.0
    assert kernel_cf(SECOND_ORDER, 0.5) == pytest.approx(0.75**3)
    assert kernel_cf(GAUSSIAN, 2.0) == pytest.approx(math.exp(-2.0), rel=1e-15)


@pytest.mark.parametrize("s", [0.0, 0.25, 0.7])
def test_second_order_is_inverse_of_its_cf(s):
    # 2 int_0^inf K(t) cos(s t) dt = phi(s)
    val = integrate.quad(lambda t: kernel_eval(SECOND_ORDER, t), 0, np.inf, weight="cos", wvar=s)[0] if s else (
        integrate.quad(lambda t: kernel_eval(SECOND_ORDER, t), 0, 400, limit=2000)[0]
    )
    assert 2 * val == pytest.approx(kernel_cf(SECOND_ORDER, s), abs=1e-6)


@pytest.mark.parametrize("k", [GAUSSIAN, SECOND_ORDER], ids=str)
def test_second_moment_by_quadrature(k):
    upper = 40.0 if k is GAUSSIAN else 800.0
    val = 2 * integrate.quad(lambda t: t * t * kernel_eval(k, t), 0, upper, limit=5000)[0]
    assert val > 0
    assert val == pytest.approx(kernel_mu2(k), abs=2e-3)


def test_reference_constants():
    assert GAUSSIAN.reference_constant == 1.06
    assert SECOND_ORDER.reference_constant == 0.427398
    assert KernelSpec.from_name("SecOrder") == SECOND_ORDER
    with pytest.raises(UnsupportedKernel):
        KernelSpec.from_name("epanechnikov")


def test_error_cf_examples():
    assert error_cf(NO_ERROR, 3.7) == 1.0
    assert error_cf(ErrorModel.laplace(0.5), 2.0) == pytest.approx(1 / 1.5, rel=1e-15)
    assert error_cf(ErrorModel.gaussian(1.0), 1.0) == pytest.approx(math.exp(-0.5), rel=1e-15)


@settings(max_examples=50, deadline=None)
@given(t=st.floats(-30, 30), s=st.floats(0, 3))
def test_error_cf_even_positive_unit_at_zero(t, s):
    for e in (ErrorModel.laplace(s), ErrorModel.gaussian(s)):
        assert error_cf(e, 0.0) == 1.0
        assert error_cf(e, t) == error_cf(e, -t)
        assert error_cf(e, t) > 0 or s * abs(t) > 30


def _deconv_oracle(k, e, h1, t):
    p = k.cf_power
    return cos_quad(lambda s: (1 - s * s) ** p / error_cf(e, s / h1), t)


def test_deconv_laplace_example():
    e = ErrorModel.laplace(0.5)
    got = deconv_kernel_eval(SECOND_ORDER, e, 0.3, 0.7)
    assert got == pytest.approx(_deconv_oracle(SECOND_ORDER, e, 0.3, 0.7), abs=1e-8)


def test_deconv_laplace_lattice():
    ts = np.linspace(0.0, 12.0, 5)
    hs = [0.1, 0.2, 0.35, 0.6, 1.0]
    ss = [0.1, 0.3, 0.5, 1.0]
    worst = 0.0
    for t in ts:
        for h in hs:
            for s in ss:
                e = ErrorModel.laplace(s)
                worst = max(worst, abs(deconv_kernel_eval(SECOND_ORDER, e, h, t) - _deconv_oracle(SECOND_ORDER, e, h, t)))
    assert worst <= 1e-8


@pytest.mark.parametrize("t", [0.0, 0.7, 3.0, 15.0])
@pytest.mark.parametrize("h1", [0.2, 0.5])
def test_deconv_gaussian_matches_quadrature(t, h1):
    e = ErrorModel.gaussian(0.5)
    assert deconv_kernel_eval(SECOND_ORDER, e, h1, t) == pytest.approx(
        _deconv_oracle(SECOND_ORDER, e, h1, t), rel=1e-10, abs=1e-10
    )


def test_deconv_without_error_is_the_kernel():
    t = np.linspace(-9, 9, 37)
    for k in COMPACT:
        np.testing.assert_array_equal(deconv_kernel_eval(k, NO_ERROR, 0.3, t), kernel_eval(k, t))
        np.testing.assert_array_equal(deconv_kernel_eval(k, ErrorModel.laplace(0.0), 0.3, t), kernel_eval(k, t))


@settings(max_examples=40, deadline=None)
@given(t=st.floats(0, 40), h1=st.floats(0.05, 2), s=st.floats(0.01, 1))
def test_deconv_even(t, h1, s):
    for e in (ErrorModel.laplace(s), ErrorModel.gaussian(min(s, 0.5))):
        assert deconv_kernel_eval(SECOND_ORDER, e, h1, t) == pytest.approx(
            deconv_kernel_eval(SECOND_ORDER, e, h1, -t), abs=1e-13
        )


def test_deconv_rejects_gaussian_and_bad_bandwidth():
    with pytest.raises(UnsupportedKernel):
        deconv_kernel_eval(GAUSSIAN, ErrorModel.laplace(0.5), 0.3, 0.0)
    with pytest.raises(ValueError):
        deconv_kernel_eval(SECOND_ORDER, ErrorModel.laplace(0.5), 0.0, 0.0)


@pytest.mark.parametrize("e", [ErrorModel.laplace(0.5), ErrorModel.gaussian(0.3)], ids=["laplace", "gaussian"])
def test_deconv_kernel_integrates_to_one(e):
    h = 0.3
    w = np.linspace(-150, 150, 600001)
    val = np.trapezoid(deconv_kernel_eval(SECOND_ORDER, e, h, w / h), w) / h
    assert val == pytest.approx(1.0, abs=1e-4)


@pytest.mark.parametrize("e", [ErrorModel.laplace(0.5), ErrorModel.gaussian(0.5)], ids=["laplace", "gaussian"])
def test_unbiasedness_transfer(e):
    rng = np.random.default_rng(11)
    M, h, x0 = 100_000, 0.3, 0.4
    if e.kind.value == "laplace":
        U = rng.laplace(0.0, e.sigma_u / math.sqrt(2), M)
    else:
        U = rng.normal(0.0, e.sigma_u, M)
    for x in (0.4, 0.55, 1.0):
        kstar = deconv_kernel_eval(SECOND_ORDER, e, h, (x0 + U - x) / h)
        se = kstar.std(ddof=1) / math.sqrt(M)
        assert abs(kstar.mean() - kernel_eval(SECOND_ORDER, (x0 - x) / h)) <= 3 * se
