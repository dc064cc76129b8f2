"""Modified Bessel functions of the second kind.

Orders 0 and 1 are evaluated by a numba kernel: the ascending power series
for ``x <= 2`` and Steed's continued fraction (Temme's CF2) above it, both
returning the exponentially scaled values ``exp(x) * K_nu(x)``.  Order 2 and
higher integer orders follow from the upward recurrence
``K_{n+1}(x) = K_{n-1}(x) + (2n / x) K_n(x)``; half-integer orders use the
terminating closed form.  The kernels are importable from numba code so the
score filter can call them without leaving nopython mode.
"""

import math

import numpy as np
from numba import njit
from scipy import special as _sp

from .errors import DomainError, NumericError

__all__ = [
    "bessel_k",
    "bessel_k_scaled",
    "log_bessel_k",
    "bessel_ratio_score",
    "k01e",
    "log_k1",
    "ratio_score",
]

_EULER = 0.57721566490153286061
_TINY = np.finfo(float).tiny


@njit(cache=True)
def k01e(x):
    """Return ``(exp(x) K_0(x), exp(x) K_1(x))`` for ``x > 0``."""
    if x <= 2.0:
        h = 0.25 * x * x
        lg = math.log(0.5 * x)
        term0 = 1.0
        i0 = 1.0
        s0 = 0.0
        harm = 0.0
        term1 = 1.0
        i1 = 1.0
        psi_a = -_EULER
        psi_b = 1.0 - _EULER
        s1 = psi_a + psi_b
        k = 0
        while True:
            k += 1
            term0 *= h / (k * k)
            harm += 1.0 / k
            i0 += term0
            s0 += term0 * harm
            term1 *= h / (k * (k + 1.0))
            i1 += term1
            psi_a += 1.0 / k
            psi_b += 1.0 / (k + 1.0)
            s1 += term1 * (psi_a + psi_b)
            if k > 2 and term0 < 1e-17 * i0:
                break
        k0 = -(lg + _EULER) * i0 + s0
        k1 = 1.0 / x + 0.5 * x * i1 * lg - 0.25 * x * s1
        e = math.exp(x)
        return k0 * e, k1 * e
    b = 2.0 * (1.0 + x)
    d = 1.0 / b
    h = d
    delh = d
    q1 = 0.0
    q2 = 1.0
    a1 = 0.25
    q = a1
    c = a1
    a = -a1
    s = 1.0 + q * delh
    for i in range(1, 100000):
        a -= 2.0 * i
        c = -a * c / (i + 1.0)
        qnew = (q1 - b * q2) / a
        q1 = q2
        q2 = qnew
        q += c * qnew
        b += 2.0
        d = 1.0 / (b + a * d)
        delh = (b * d - 1.0) * delh
        h += delh
        dels = q * delh
        s += dels
        if abs(dels / s) < 1e-16:
            break
    k0 = math.sqrt(math.pi / (2.0 * x)) / s
    k1 = k0 * (x + 0.5 - a1 * h) / x
    return k0, k1


@njit(cache=True)
def log_k1(x):
    """``ln K_1(x)`` without underflow."""
    return math.log(k01e(x)[1]) - x


@njit(cache=True)
def ratio_score(x):
    """``(K_0(x) + K_2(x)) / (2 K_1(x))``, i.e. ``-d/dx ln K_1(x)``."""
    k0, k1 = k01e(x)
    return k0 / k1 + 1.0 / x


@njit(cache=True)
def _scaled_integer(n, x):
    k0, k1 = k01e(x)
    if n == 0:
        return k0
    km, kn = k0, k1
    for j in range(1, n):
        km, kn = kn, km + (2.0 * j / x) * kn
    return kn


@njit(cache=True)
def _scaled_half_integer(n, x):
    # K_{n+1/2}(x) e^x = sqrt(pi/2x) * sum_k (n+k)! / (k! (n-k)!) (2x)^-k
    total = 0.0
    coef = 1.0
    for k in range(n + 1):
        if k > 0:
            coef *= (n + k) * (n - k + 1) / k / (2.0 * x)
        total += coef
    return math.sqrt(math.pi / (2.0 * x)) * total


@njit(cache=True)
def _scaled_integer_array(n, xs, out):
    for i in range(xs.size):
        out[i] = _scaled_integer(n, xs[i])


@njit(cache=True)
def _scaled_half_array(n, xs, out):
    for i in range(xs.size):
        out[i] = _scaled_half_integer(n, xs[i])


@njit(cache=True)
def _ratio_array(xs, out):
    for i in range(xs.size):
        out[i] = ratio_score(xs[i])


def _check_args(order, x):
    if not np.isfinite(order):
        raise DomainError(f"Bessel order must be finite, got {order!r}")
    xa = np.asarray(x, dtype=float)
    if np.any(~(xa > 0)) or np.any(~np.isfinite(xa)):
        raise DomainError("Bessel argument must be finite and strictly positive")
    return abs(float(order)), xa


def _scaled(order, xa):
    flat = np.ascontiguousarray(xa, dtype=float).ravel()
    out = np.empty_like(flat)
    twice = 2.0 * order
    if order == int(order) and order <= 64:
        _scaled_integer_array(int(order), flat, out)
    elif twice == int(twice) and order <= 64:
        _scaled_half_array(int(order - 0.5), flat, out)
    else:
        out = _sp.kve(order, flat)
    return out.reshape(xa.shape)


def _unwrap(arr, like):
    return float(arr) if np.ndim(like) == 0 else arr


def bessel_k_scaled(order, x):
    """Exponentially scaled Bessel function ``exp(x) * K_order(x)``.

    Parameters
    ----------
    order : float
        Real order; ``K_nu = K_-nu`` so the sign is ignored.
    x : float or array_like
        Strictly positive argument.
    """
    nu, xa = _check_args(order, x)
    return _unwrap(_scaled(nu, xa), x)


def log_bessel_k(order, x):
    """Natural logarithm of ``K_order(x)``; finite for arguments up to 1e6 and beyond."""
    nu, xa = _check_args(order, x)
    return _unwrap(np.log(_scaled(nu, xa)) - xa, x)


def bessel_k(order, x):
    """Modified Bessel function of the second kind ``K_order(x)``.

    Raises
    ------
    DomainError
        If ``x <= 0`` or the order is not finite.
    NumericError
        If the unscaled value underflows; use :func:`bessel_k_scaled` or
        :func:`log_bessel_k` in that region.
    """
    nu, xa = _check_args(order, x)
    val = _scaled(nu, xa) * np.exp(-xa)
    if np.any(val < _TINY):
        raise NumericError(
            "K_nu(x) underflows for this argument; use bessel_k_scaled or log_bessel_k"
        )
    return _unwrap(val, x)


def bessel_ratio_score(x):
    """``(K_0(x) + K_2(x)) / (2 K_1(x))``, the factor shared by the NIG scores.

    Equals ``-d/dx ln K_1(x)`` and is strictly greater than one.
    """
    _, xa = _check_args(1.0, x)
    flat = np.ascontiguousarray(xa, dtype=float).ravel()
    out = np.empty_like(flat)
    _ratio_array(flat, out)
    return _unwrap(out.reshape(xa.shape), x)
