import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from nigdcs.errors import DomainError, NumericError
from nigdcs.special import bessel_k, bessel_k_scaled, bessel_ratio_score, log_bessel_k


def k_quad(nu, x):
    """Integral oracle K_nu(x) = int_0^inf exp(-x cosh t) cosh(nu t) dt.

    The integrand is below 1e-300 of its peak once x (cosh t - 1) > 700, which
    fixes a finite upper limit.
    """
    upper = math.acosh(1.0 + 700.0 / x)
    val, _ = integrate.quad(
        lambda t: math.exp(-x * (math.cosh(t) - 1.0)) * math.cosh(nu * t), 0, upper, epsabs=0, epsrel=1e-13,
        limit=400,
    )
    return val * math.exp(-x)


def k_mp(nu, x):
    with mp.workdps(40):
        return float(mp.besselk(nu, x))


def test_half_order_closed_form():
    assert bessel_k(0.5, 1.0) == pytest.approx(math.sqrt(math.pi / 2) * math.exp(-1), rel=1e-14)
    assert bessel_k(0.5, 1.0) == pytest.approx(0.4610685, abs=1e-7)


def test_negative_order_is_symmetric():
    for nu in (0.5, 1.0, 1.5, 2.0, 0.3):
        assert bessel_k(-nu, 1.7) == bessel_k(nu, 1.7)


def test_k1_at_one_matches_integral_oracle():
    assert bessel_k(1.0, 1.0) == pytest.approx(k_quad(1.0, 1.0), rel=1e-12)
    assert bessel_k(1.0, 1.0) == pytest.approx(0.6019072, abs=1e-7)


def test_scaled_half_order():
    assert bessel_k_scaled(0.5, 10.0) == pytest.approx(math.sqrt(math.pi / 20), rel=1e-14)


def test_log_k1_at_one():
    assert log_bessel_k(1.0, 1.0) == pytest.approx(math.log(k_quad(1.0, 1.0)), rel=1e-12)
    assert log_bessel_k(1.0, 1.0) == pytest.approx(-0.5076, abs=1e-4)


def test_log_k1_large_argument_asymptotic():
    x = 500.0
    series = 1.0 + 3.0 / (8 * x) - 15.0 / (128 * x**2) + 105.0 / (1024 * x**3)
    expected = 0.5 * math.log(math.pi / (2 * x)) - x + math.log(series)
    assert log_bessel_k(1.0, x) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("nu", [0.0, 1.0, 2.0, 0.5, 1.5, 2.5])
def test_integral_oracle_on_log_grid(nu):
    xs = np.logspace(-3, np.log10(50), 200)
    got = bessel_k(nu, xs)
    want = np.array([k_mp(nu, x) for x in xs])
    np.testing.assert_allclose(got, want, rtol=1e-12)


@pytest.mark.parametrize("nu", [0.0, 1.0])
def test_quadrature_oracle_agreement(nu):
    xs = np.logspace(-3, np.log10(50), 40)
    got = bessel_k(nu, xs)
    want = np.array([k_quad(nu, x) for x in xs])
    np.testing.assert_allclose(got, want, rtol=1e-10)


def test_accuracy_up_to_700():
    xs = np.linspace(50, 700, 60)
    for nu in (0.0, 1.0, 2.0):
        want = np.array([k_mp(nu, x) for x in xs])
        np.testing.assert_allclose(bessel_k(nu, xs), want, rtol=1e-12)


def test_non_half_integer_order():
    xs = np.array([0.01, 0.7, 3.0, 40.0])
    want = np.array([k_mp(0.3, x) for x in xs])
    np.testing.assert_allclose(bessel_k(0.3, xs), want, rtol=1e-12)


def test_recurrence_residual():
    xs = np.logspace(-2, 2, 300)
    k0, k1, k2 = (bessel_k_scaled(n, xs) for n in (0, 1, 2))
    assert np.max(np.abs(k2 - k0 - 2.0 / xs * k1) / k2) <= 1e-10


def test_log_and_scaled_consistent():
    xs = np.logspace(-3, 6, 100)
    for nu in (0.0, 1.0, 2.0):
        lv = log_bessel_k(nu, xs)
        assert np.all(np.isfinite(lv))
        np.testing.assert_allclose(lv, np.log(bessel_k_scaled(nu, xs)) - xs, rtol=1e-12)


def test_scaled_finite_at_1e6():
    assert math.isfinite(bessel_k_scaled(1.0, 1e6))
    assert bessel_k_scaled(1.0, 1e6) == pytest.approx(math.sqrt(math.pi / 2e6) * (1 + 3 / 8e6), rel=1e-12)


def test_ratio_at_one():
    k0, k1 = k_quad(0.0, 1.0), k_quad(1.0, 1.0)
    k2 = k0 + 2.0 * k1
    assert bessel_ratio_score(1.0) == pytest.approx((k0 + k2) / (2 * k1), rel=1e-12)


def test_ratio_large_argument():
    # -d/dx ln K_1 = 1 + 1/(2x) + 3/(8x^2) + O(x^-3)
    x = 1000.0
    assert abs(bessel_ratio_score(x) - (1.0 + 1.0 / (2 * x) + 3.0 / (8 * x**2))) <= 1e-6
    with mp.workdps(40):
        want = float((mp.besselk(0, x) + mp.besselk(2, x)) / (2 * mp.besselk(1, x)))
    assert bessel_ratio_score(x) == pytest.approx(want, rel=1e-13)


def test_ratio_is_minus_log_derivative():
    h = 1e-5
    fd = -(log_bessel_k(1.0, 2.0 + h) - log_bessel_k(1.0, 2.0 - h)) / (2 * h)
    assert bessel_ratio_score(2.0) == pytest.approx(fd, abs=1e-7)


@given(st.floats(min_value=1e-3, max_value=1e4))
@settings(max_examples=200, deadline=None)
def test_ratio_exceeds_one(x):
    assert bessel_ratio_score(x) > 1.0


@given(st.floats(min_value=1e-3, max_value=600), st.sampled_from([0.0, 0.5, 1.0, 2.0, 2.5]))
@settings(max_examples=200, deadline=None)
def test_positive_and_decreasing(x, nu):
    a, b = bessel_k(nu, x), bessel_k(nu, x * 1.01)
    assert a > 0
    assert b < a


@pytest.mark.parametrize("x", [0.0, -1.0, np.nan, np.inf])
def test_domain_errors(x):
    for fn in (lambda: bessel_k(1.0, x), lambda: bessel_k_scaled(1.0, x), lambda: log_bessel_k(1.0, x)):
        with pytest.raises(DomainError):
            fn()
    with pytest.raises(DomainError):
        bessel_ratio_score(x)


def test_non_finite_order_rejected():
    with pytest.raises(DomainError):
        bessel_k(np.nan, 1.0)


def test_underflow_directs_to_scaled_variant():
    with pytest.raises(NumericError, match="bessel_k_scaled"):
        bessel_k(1.0, 800.0)


def test_array_shape_preserved():
    xs = np.array([[0.5, 1.0], [2.0, 3.0]])
    assert bessel_k(1.0, xs).shape == (2, 2)
    assert isinstance(bessel_k(1.0, 1.0), float)
