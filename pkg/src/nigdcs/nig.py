"""The normal inverse Gaussian distribution as a value type.

Parameterisation is ``NIG(mu, delta, alpha, beta)`` with location ``mu``,
scale ``delta > 0``, tail ``alpha > 0`` and skewness ``|beta| < alpha``.
The density is

    f(x) = delta * alpha / pi * K_1(alpha * s) / s * exp(delta * gamma + beta * (x - mu)),

with ``s = sqrt(delta**2 + (x - mu)**2)`` and ``gamma = sqrt(alpha**2 - beta**2)``.
"""

import math
from dataclasses import dataclass

import numpy as np
from numba import cfunc, njit, types
from scipy import LowLevelCallable, integrate, optimize, stats

from .errors import ContractError, DataError, DomainError, NumericError
from .special import k01e

__all__ = [
    "NigParams",
    "IgMixture",
    "nig_pdf",
    "nig_log_pdf",
    "nig_cdf",
    "nig_quantile",
    "nig_sample",
    "ig_sample",
    "convolve_nig",
    "nig_sum_density",
    "nig_moments",
    "nig_fit_static",
]

_LOG_PI = math.log(math.pi)
_TAIL_BUDGET = 1e-13


@dataclass(frozen=True)
class NigParams:
    """Parameters of a NIG law.

    ``beta = 0`` is accepted as the symmetric member of the family.
    """

    mu: float
    delta: float
    alpha: float
    beta: float

    def __post_init__(self):
        vals = (self.mu, self.delta, self.alpha, self.beta)
        if not all(math.isfinite(v) for v in vals):
            raise DomainError(f"NIG parameters must be finite: {vals}")
        if not self.delta > 0:
            raise DomainError(f"delta must be positive, got {self.delta}")
        if not self.alpha > 0:
            raise DomainError(f"alpha must be positive, got {self.alpha}")
        if not abs(self.beta) < self.alpha:
            raise DomainError(f"|beta| must be < alpha, got beta={self.beta}, alpha={self.alpha}")

    @property
    def gamma(self):
        return math.sqrt((self.alpha - self.beta) * (self.alpha + self.beta))

    def as_tuple(self):
        return (self.mu, self.delta, self.alpha, self.beta)


@dataclass(frozen=True)
class IgMixture:
    """Inverse Gaussian mixing law ``GIG(-1/2, delta, gamma)``.

    Its mean is ``delta / gamma`` and its shape parameter ``delta**2``.
    """

    delta: float
    gamma: float

    def __post_init__(self):
        if not (self.delta > 0 and self.gamma > 0):
            raise DomainError("inverse Gaussian parameters must be positive")

    @classmethod
    def from_nig(cls, p):
        return cls(p.delta, p.gamma)

    @property
    def mean(self):
        return self.delta / self.gamma

    @property
    def shape(self):
        return self.delta**2


# ---------------------------------------------------------------------------
# density kernels
# ---------------------------------------------------------------------------


@njit(cache=True)
def _logpdf(x, mu, delta, alpha, beta, gamma):
    y = x - mu
    s = math.hypot(delta, y)
    z = alpha * s
    k1e = k01e(z)[1]
    return (
        math.log(alpha * delta)
        - _LOG_PI
        + (delta * gamma - z + beta * y)
        + math.log(k1e)
        - math.log(s)
    )


@njit(cache=True)
def _logpdf_array(xs, mu, delta, alpha, beta, gamma, out):
    for i in range(xs.size):
        out[i] = _logpdf(xs[i], mu, delta, alpha, beta, gamma)


@cfunc(types.double(types.intc, types.CPointer(types.double)), cache=True)
def _pdf_cfunc(n, xx):
    return math.exp(_logpdf(xx[0], xx[1], xx[2], xx[3], xx[4], xx[5]))


_PDF_CALLABLE = LowLevelCallable(
    _pdf_cfunc.ctypes, signature="double (int, double *)"
)


def _validated(p):
    if not isinstance(p, NigParams):
        raise DomainError(f"expected NigParams, got {type(p).__name__}")
    return p


def _as_array(x):
    xa = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(xa)):
        raise DomainError("NIG density arguments must be finite")
    return xa


def nig_log_pdf(p, x):
    """Log-density, evaluated in log space so far tails stay finite."""
    p = _validated(p)
    xa = _as_array(x)
    flat = np.ascontiguousarray(xa).ravel()
    out = np.empty_like(flat)
    _logpdf_array(flat, p.mu, p.delta, p.alpha, p.beta, p.gamma, out)
    out = out.reshape(xa.shape)
    return float(out) if np.ndim(x) == 0 else out


def nig_pdf(p, x):
    """Density of ``NIG(p)`` at ``x``."""
    return np.exp(nig_log_pdf(p, x))


# ---------------------------------------------------------------------------
# distribution function and quantile
# ---------------------------------------------------------------------------


def _tail_extent(p, side):
    """Distance from ``mu`` beyond which the tail mass is below the budget.

    Uses ``sqrt(z) e^z K_1(z)`` decreasing in ``z``, which gives
    ``pdf(mu + y) <= C |y|^-1.5 exp(delta*gamma - kappa |y|)`` with
    ``kappa = alpha - side * beta``.
    """
    z0 = p.alpha * p.delta
    g0 = math.sqrt(z0) * k01e(z0)[1]
    log_c = math.log(p.delta * math.sqrt(p.alpha) * g0 / math.pi) + p.delta * p.gamma
    kappa = p.alpha - side * p.beta
    target = math.log(_TAIL_BUDGET)
    length = max(p.delta, 1.0 / kappa)
    while log_c - 1.5 * math.log(length) - kappa * length - math.log(kappa) > target:
        length *= 1.25
    return length


def _quad(p, a, b):
    if a == b:
        return 0.0
    args = (p.mu, p.delta, p.alpha, p.beta, p.gamma)
    val, _ = integrate.quad(
        _PDF_CALLABLE, a, b, args=args, epsabs=1e-15, epsrel=1e-13, limit=200
    )
    return val


def _breakpoints(p, lo, hi):
    """Geometric grid around ``mu`` so quad sees the peak and the tails separately."""
    pts = [p.mu]
    step = p.delta
    while True:
        pts.extend((p.mu - step, p.mu + step))
        if p.mu - step < lo and p.mu + step > hi:
            break
        step *= 4.0
    pts = sorted(x for x in pts if lo < x < hi)
    return [lo] + pts + [hi]


def _mass(p, a, b):
    """Integral of the density over ``[a, b]``, ``a <= b``."""
    grid = _breakpoints(p, a, b)
    return math.fsum(_quad(p, u, v) for u, v in zip(grid[:-1], grid[1:]))


class _Cdf:
    """Distribution function of one parameter set, with its truncation points cached."""

    def __init__(self, p):
        self.p = p
        self.left = p.mu - _tail_extent(p, -1.0)
        self.right = p.mu + _tail_extent(p, 1.0)

    def __call__(self, x):
        p = self.p
        if x <= self.left:
            return 0.0
        if x >= self.right:
            return 1.0
        if x <= p.mu:
            return min(1.0, _mass(p, self.left, x))
        return max(0.0, 1.0 - _mass(p, x, self.right))


def nig_cdf(p, x):
    """Distribution function by adaptive quadrature of the density.

    The integration starts from the nearer truncated tail; the neglected mass
    is bounded by 1e-13.
    """
    p = _validated(p)
    xa = _as_array(x) if np.ndim(x) else None
    if xa is None:
        if not math.isfinite(float(x)):
            if math.isnan(float(x)):
                raise DomainError("x must not be NaN")
            return 0.0 if x < 0 else 1.0
        return _Cdf(p)(float(x))
    cdf = _Cdf(p)
    flat = xa.ravel()
    order = np.argsort(flat)
    out = np.empty_like(flat)
    # cumulate segment masses so an array costs one pass over the support
    left_of = [i for i in order if flat[i] <= p.mu]
    right_of = [i for i in order if flat[i] > p.mu][::-1]
    acc, prev = 0.0, cdf.left
    for i in left_of:
        xi = flat[i]
        if xi > prev:
            acc += _mass(p, prev, xi)
            prev = xi
        out[i] = min(acc, 1.0) if xi > cdf.left else 0.0
    acc, prev = 0.0, cdf.right
    for i in right_of:
        xi = flat[i]
        if xi < prev:
            acc += _mass(p, xi, prev)
            prev = xi
        out[i] = max(1.0 - acc, 0.0) if xi < cdf.right else 1.0
    return out.reshape(xa.shape)


def nig_quantile(p, level, tol=1e-12, max_iter=200):
    """Quantile of ``NIG(p)`` at probability ``level``.

    Safeguarded Newton iteration inside a bracket that starts at
    ``mean +/- 12 sd`` and widens geometrically until it straddles ``level``.
    The distribution function is advanced by integrating the density between
    consecutive iterates.
    """
    p = _validated(p)
    if np.ndim(level):
        return np.array([nig_quantile(p, lv, tol, max_iter) for lv in np.ravel(level)]).reshape(
            np.shape(level)
        )
    level = float(level)
    if not 0.0 < level < 1.0:
        raise DomainError(f"level must lie in (0, 1), got {level}")
    mean, var, _, _ = nig_moments(p)
    sd = math.sqrt(var)
    cdf = _Cdf(p)
    lo, hi = mean - 12.0 * sd, mean + 12.0 * sd
    f_lo, f_hi = cdf(lo), cdf(hi)
    width = 12.0 * sd
    for _ in range(60):
        if f_lo < level:
            break
        width *= 2.0
        lo = mean - width
        f_lo = cdf(lo)
    for _ in range(60):
        if f_hi > level:
            break
        width *= 2.0
        hi = mean + width
        f_hi = cdf(hi)
    if not f_lo < level < f_hi:
        raise NumericError(
            f"could not bracket level {level}: cdf({lo:.6g})={f_lo:.3g}, cdf({hi:.6g})={f_hi:.3g}"
        )
    x = min(max(mean + sd * stats.norm.ppf(level), lo), hi)
    fx = cdf(x)
    for _ in range(max_iter):
        err = fx - level
        if abs(err) <= tol:
            return x
        if err < 0:
            lo = x
        else:
            hi = x
        dens = math.exp(_logpdf(x, p.mu, p.delta, p.alpha, p.beta, p.gamma))
        step = err / dens if dens > 0 else math.inf
        x_new = x - step
        if not lo < x_new < hi:
            x_new = 0.5 * (lo + hi)
        if x_new == x:
            return x
        if x_new > x:
            fx = fx + _mass(p, x, x_new)
        else:
            fx = fx - _mass(p, x_new, x)
        x = x_new
        if hi - lo <= 4.0 * np.finfo(float).eps * max(1.0, abs(x)):
            return x
    raise NumericError(f"quantile iteration did not converge at level {level}")


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _ig_transform(mean, shape, normal, uniform):
    """Michael-Schucany-Haas transform of one normal and one uniform draw."""
    w = mean * normal**2 / (2.0 * shape)
    root = mean / (1.0 + w + np.sqrt(w * w + 2.0 * w))
    take_root = uniform * (mean + root) <= mean
    return np.where(take_root, root, mean * mean / root)


def ig_sample(mix, n, seed):
    """Draw ``n`` inverse Gaussian variates with mean ``delta/gamma`` and shape ``delta**2``."""
    if n < 1:
        raise DomainError("sample size must be at least 1")
    rng = _rng(seed)
    return _ig_transform(mix.mean, mix.shape, rng.standard_normal(n), rng.random(n))


def nig_sample(p, n, seed):
    """Draw ``n`` NIG variates as ``mu + beta Z + sqrt(Z) Y``.

    ``seed`` is an integer or a ``numpy.random.Generator``; no global state is used.
    """
    p = _validated(p)
    if n < 1:
        raise DomainError("sample size must be at least 1")
    rng = _rng(seed)
    z = ig_sample(IgMixture.from_nig(p), n, rng)
    return p.mu + p.beta * z + np.sqrt(z) * rng.standard_normal(n)


# ---------------------------------------------------------------------------
# closure under convolution
# ---------------------------------------------------------------------------


def convolve_nig(p1, p2, rtol=1e-9):
    """Law of the sum of independent ``NIG(p1)`` and ``NIG(p2)`` variables.

    Only defined when tail and skewness parameters agree.
    """
    p1, p2 = _validated(p1), _validated(p2)
    if not math.isclose(p1.alpha, p2.alpha, rel_tol=rtol):
        raise ContractError(f"alpha mismatch: {p1.alpha} vs {p2.alpha}")
    if not math.isclose(p1.beta, p2.beta, rel_tol=rtol, abs_tol=rtol * p1.alpha):
        raise ContractError(f"beta mismatch: {p1.beta} vs {p2.beta}")
    return NigParams(p1.mu + p2.mu, p1.delta + p2.delta, p1.alpha, p1.beta)


def nig_sum_density(base, n, y):
    """Density of the sum of ``n`` i.i.d. ``NIG(base)`` variables."""
    base = _validated(base)
    if int(n) != n or n < 1:
        raise DomainError(f"n must be a positive integer, got {n}")
    summed = NigParams(n * base.mu, n * base.delta, base.alpha, base.beta)
    return nig_pdf(summed, y)


# ---------------------------------------------------------------------------
# moments and static fitting
# ---------------------------------------------------------------------------


def nig_moments(p):
    """Mean, variance, skewness and excess kurtosis."""
    p = _validated(p)
    g = p.gamma
    dg = p.delta * g
    mean = p.mu + p.delta * p.beta / g
    var = p.delta * p.alpha**2 / g**3
    skew = 3.0 * p.beta / (p.alpha * math.sqrt(dg))
    kurt = 3.0 * (1.0 + 4.0 * p.beta**2 / p.alpha**2) / dg
    return mean, var, skew, kurt


def _from_moments(mean, var, skew, kurt):
    rho2 = skew**2 / (3.0 * kurt - 4.0 * skew**2)
    rho = math.copysign(math.sqrt(rho2), skew)
    dg = 3.0 * (1.0 + 4.0 * rho2) / kurt
    gamma = math.sqrt(dg / (var * (1.0 - rho2)))
    delta = dg / gamma
    alpha = gamma / math.sqrt(1.0 - rho2)
    beta = rho * alpha
    return NigParams(mean - delta * beta / gamma, delta, alpha, beta)


_MIN_KURT = 1e-3
_MAX_RHO2 = 0.99


def nig_fit_static(xs, method="moments", min_obs=50):
    """Fit a constant NIG law to a sample.

    ``method="moments"`` inverts the first four sample moments in closed form.
    When skewness and kurtosis fall outside the NIG region
    (``3 kurt > 4 skew**2``) the symmetric law with matching mean, variance
    and kurtosis is returned.  ``method="mle"`` refines the moment fit by
    Nelder-Mead on the log-likelihood.
    """
    xs = np.asarray(xs, dtype=float)
    if xs.ndim != 1 or xs.size < min_obs:
        raise DataError(f"need at least {min_obs} observations, got {xs.size}")
    if not np.all(np.isfinite(xs)):
        raise DataError("sample contains non-finite values")
    var = float(np.var(xs))
    if not var > 1e-300 or np.ptp(xs) == 0:
        raise DataError("degenerate sample: zero variance")
    mean = float(np.mean(xs))
    skew = float(stats.skew(xs))
    kurt = max(float(stats.kurtosis(xs)), _MIN_KURT)
    if 3.0 * kurt > 4.0 * skew**2 and skew**2 / (3.0 * kurt - 4.0 * skew**2) < _MAX_RHO2:
        start = _from_moments(mean, var, skew, kurt)
    else:
        start = _from_moments(mean, var, 0.0, kurt)
    if method == "moments":
        return start
    if method != "mle":
        raise ValueError(f"unknown method {method!r}")
    return _refine_mle(xs, start)


@njit(cache=True)
def _neg_loglik(theta, xs):
    mu = theta[0]
    delta = math.exp(theta[1])
    alpha = math.exp(theta[2])
    beta = alpha * math.tanh(theta[3])
    gamma = alpha / math.cosh(theta[3])
    total = 0.0
    for i in range(xs.size):
        total += _logpdf(xs[i], mu, delta, alpha, beta, gamma)
    return -total


def _refine_mle(xs, start):
    sd = math.sqrt(np.var(xs))
    theta0 = np.array(
        [
            start.mu / sd,
            math.log(start.delta / sd),
            math.log(start.alpha * sd),
            math.atanh(start.beta / start.alpha),
        ]
    )
    z = xs / sd
    res = optimize.minimize(
        _neg_loglik, theta0, args=(z,), method="Nelder-Mead",
        options={"xatol": 1e-9, "fatol": 1e-10, "maxiter": 4000},
    )
    mu, ld, la, eta = res.x
    alpha = math.exp(la) / sd
    return NigParams(mu * sd, math.exp(ld) * sd, alpha, alpha * math.tanh(eta))
